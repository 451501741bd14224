"""Simulated tabletop world: scene state, neck/arm/gripper kinematics,
grasp-and-carry, a flat-shaded software rasterizer, and the simulated eye
tracker whose noise grows with eccentricity.

World frame: x right, y forward (into the desk), z up; the desk surface is
z = 0 and the desk spans x in [-desk_width/2, desk_width/2], y in
[0, desk_depth].  The placement area is the right half of the desk.  The
camera rig sits behind the near edge, looking down at the work area; the
near grid row starts below the camera's 57-degree vertical frustum, which is
what produces the paper-style out-of-view placements.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import geometry as geo


class OutOfArea(ValueError):
    pass


class ConfigInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    # desk and placement area (meters)
    desk_width: float = 0.90
    desk_depth: float = 0.60
    place_x0: float = 0.0
    place_width: float = 0.45
    place_depth: float = 0.60
    object_radius: float = 0.035
    plate_x: float = -0.20
    plate_y: float = 0.25
    plate_radius: float = 0.075
    plate_height: float = 0.005
    # camera
    width: int = 256
    height: int = 144
    hfov_deg: float = 108.0
    vfov_deg: float = 57.0
    baseline: float = 0.063  # ZED Mini-ish; the paper does not state it
    rig_x: float = 0.0
    rig_y: float = -0.20
    rig_z: float = 0.45
    initial_pitch: float = -0.51
    # episode / kinematics
    episode_length: int = 200
    control_hz: float = 10.0
    arm_speed: float = 0.04  # m per step
    arm_turn_rate: float = 0.1  # rad per step
    grip_rate: float = 0.2  # gripper units per step
    neck_rate: float = 0.05  # rad per step
    grasp_radius: float = 0.05
    lift_threshold: float = 0.10
    home_x: float = 0.15
    home_y: float = 0.15
    home_z: float = 0.15
    # placement grid
    grid_cols: int = 6
    grid_rows: int = 8
    grid_exclude_radius: float = 0.08
    grid_expected_cells: int = 44
    # gaze-noise model
    gaze_sigma0: float = 0.004
    gaze_kappa: float = 9.0
    gaze_hinge: float = 0.7
    # background clutter
    clutter_seed: int = 7
    clutter_count: int = 12
    floor_z: float = -0.70

    def __post_init__(self):
        if min(self.desk_width, self.desk_depth, self.place_width,
               self.place_depth, self.object_radius, self.plate_radius) <= 0:
            raise ConfigInfeasible("lengths must be positive")
        if self.width % 2 or self.height % 2:
            raise ConfigInfeasible("resolution must be even")
        if (self.place_x0 < -self.desk_width / 2 - 1e-9
                or self.place_x0 + self.place_width > self.desk_width / 2 + 1e-9
                or self.place_depth > self.desk_depth + 1e-9):
            raise ConfigInfeasible("placement area must lie within the desk")

    @property
    def intrinsics(self) -> geo.CameraIntrinsics:
        return _intrinsics(self.width, self.height, self.hfov_deg, self.vfov_deg)

    @property
    def rig_position(self) -> np.ndarray:
        return np.array([self.rig_x, self.rig_y, self.rig_z])

    @property
    def plate_center(self) -> np.ndarray:
        return np.array([self.plate_x, self.plate_y, 0.0])

    @property
    def initial_neck(self) -> geo.NeckPose:
        return geo.NeckPose(0.0, self.initial_pitch)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def config_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_file(self, path: str) -> None:
        lines = ["# necksim world config (key = value)"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path: str) -> "WorldConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigInfeasible(f"{path}:{lineno}: expected 'key = value'")
                key, val = (s.strip() for s in line.split("=", 1))
                if key not in kinds:
                    raise ConfigInfeasible(f"{path}:{lineno}: unknown key {key!r}")
                kwargs[key] = int(val) if kinds[key] == "int" else float(val)
        return cls(**kwargs)


@functools.lru_cache(maxsize=8)
def _intrinsics(width, height, hfov_deg, vfov_deg):
    return geo.make_intrinsics(width, height, math.radians(hfov_deg), math.radians(vfov_deg))


HOME_ROT = np.diag([1.0, -1.0, -1.0])  # tool axis pointing down


@dataclass(frozen=True)
class ArmState:
    position: np.ndarray  # (3,)
    rot6: np.ndarray  # (6,)
    gripper: float  # 1 open .. 0 closed

    def flat(self) -> np.ndarray:
        return np.concatenate([self.position, self.rot6, [self.gripper]]).astype(np.float32)

    @classmethod
    def from_flat(cls, v) -> "ArmState":
        v = np.asarray(v, dtype=np.float64).reshape(10)
        return cls(v[:3].copy(), v[3:9].copy(), float(v[9]))


@dataclass(frozen=True)
class Command:
    neck_delta: tuple  # (dyaw, dpitch) rad/step, clamped by the sim
    arm_target: ArmState


@dataclass(frozen=True)
class SceneState:
    config: WorldConfig
    object_pos: np.ndarray
    attached: bool
    lifted: bool
    neck: geo.NeckPose
    arm_pos: np.ndarray
    arm_rot: np.ndarray  # (3,3) orientation matrix
    grip: float
    step_index: int
    seed: int

    @property
    def arm_state(self) -> ArmState:
        return ArmState(self.arm_pos.copy(), geo.rot6_encode(self.arm_rot), self.grip)


@dataclass(frozen=True)
class GazeSample:
    left: tuple  # (x, y) pixels
    right: tuple
    valid: bool

    def flat(self) -> np.ndarray:
        return np.array([*self.left, *self.right], dtype=np.float32)


@dataclass(frozen=True)
class StereoFrame:
    left: np.ndarray  # (H, W, 3) uint8
    right: np.ndarray
    left_pose: geo.CameraPose
    right_pose: geo.CameraPose


def place_area(config: WorldConfig):
    return (config.place_x0, config.place_x0 + config.place_width, 0.0, config.place_depth)


def in_place_area(config: WorldConfig, xy) -> bool:
    x0, x1, y0, y1 = place_area(config)
    return x0 - 1e-9 <= xy[0] <= x1 + 1e-9 and y0 - 1e-9 <= xy[1] <= y1 + 1e-9


# ---------------------------------------------------------------------------
# placement grid

@dataclass(frozen=True)
class GridCell:
    cell_id: str
    row: int
    col: int
    position: np.ndarray  # (2,) xy of the cell center
    label: str  # InView / Partial / Outside (at the initial neck pose)
    excluded: bool


def grid_lattice(config: WorldConfig):
    """Full lattice including excluded cells (for the heatmap X marks)."""
    x0, _, y0, _ = place_area(config)
    cells = []
    home = np.array([config.home_x, config.home_y])
    for row in range(config.grid_rows):
        cy = y0 + config.place_depth * (row + 0.5) / config.grid_rows
        for col in range(config.grid_cols):
            cx = x0 + config.place_width * (col + 0.5) / config.grid_cols
            pos = np.array([cx, cy])
            excluded = bool(np.linalg.norm(pos - home) < config.grid_exclude_radius)
            label = object_view_label(config, np.array([cx, cy, config.object_radius]),
                                      config.initial_neck)
            cells.append(GridCell(f"r{row}c{col}", row, col, pos, label, excluded))
    return cells


def grid_positions(config: WorldConfig):
    """The usable placement cells (lattice minus arm-home overlaps)."""
    cells = [c for c in grid_lattice(config) if not c.excluded]
    if len(cells) != config.grid_expected_cells:
        raise ConfigInfeasible(
            f"lattice yields {len(cells)} usable cells, expected {config.grid_expected_cells}")
    return cells


def eye_poses(config: WorldConfig, neck: geo.NeckPose):
    """Left/right camera poses: the rig pose offset by +-baseline/2 along the
    camera's x axis."""
    pose = geo.neck_to_camera_pose(neck, config.rig_position)
    xaxis = pose.orientation[:, 0]
    half = 0.5 * config.baseline
    left = geo.CameraPose(pose.position - half * xaxis, pose.orientation)
    right = geo.CameraPose(pose.position + half * xaxis, pose.orientation)
    return left, right


def object_view_label(config: WorldConfig, center, neck: geo.NeckPose) -> str:
    """Strictest two-eye frustum label: Outside only when outside for both
    eyes, InView only when fully in view for both (so Outside really means
    zero rendered pixels in either eye)."""
    K = config.intrinsics
    left, right = eye_poses(config, neck)
    a = geo.sphere_view_status(K, left, center, config.object_radius)
    b = geo.sphere_view_status(K, right, center, config.object_radius)
    if a == geo.OUTSIDE and b == geo.OUTSIDE:
        return geo.OUTSIDE
    if a == geo.IN_VIEW and b == geo.IN_VIEW:
        return geo.IN_VIEW
    return geo.PARTIAL


# ---------------------------------------------------------------------------
# scene construction and stepping

def home_arm(config: WorldConfig) -> ArmState:
    return ArmState(np.array([config.home_x, config.home_y, config.home_z]),
                    geo.rot6_encode(HOME_ROT), 1.0)


def new_scene(config: WorldConfig, cell=None, position=None, seed: int = 0,
              jitter: float = 0.0) -> SceneState:
    """Deterministic initial state with the object at a grid cell or an
    explicit (x, y) position inside the placement area."""
    if (cell is None) == (position is None):
        raise ValueError("give exactly one of cell or position")
    if cell is not None:
        xy = np.asarray(cell.position if isinstance(cell, GridCell) else cell, dtype=np.float64)
    else:
        xy = np.asarray(position, dtype=np.float64)[:2].copy()
    if jitter > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6A11)))
        xy = xy + rng.uniform(-jitter, jitter, size=2)
        x0, x1, y0, y1 = place_area(config)
        xy = np.clip(xy, [x0, y0], [x1, y1])
    if not in_place_area(config, xy):
        raise OutOfArea(f"object position {xy} outside the placement area")
    return SceneState(
        config=config,
        object_pos=np.array([xy[0], xy[1], config.object_radius]),
        attached=False,
        lifted=False,
        neck=config.initial_neck,
        arm_pos=np.array([config.home_x, config.home_y, config.home_z]),
        arm_rot=HOME_ROT.copy(),
        grip=1.0,
        step_index=0,
        seed=seed,
    )


ARM_BOUNDS_LO = np.array([-0.55, -0.10, 0.04])
ARM_BOUNDS_HI = np.array([0.55, 0.70, 0.80])


def step(state: SceneState, cmd: Command) -> SceneState:
    """Advance one control step.  All command components are clamped (rates
    and limits), so stepping never raises."""
    cfg = state.config
    # neck
    dyaw = float(np.clip(cmd.neck_delta[0], -cfg.neck_rate, cfg.neck_rate))
    dpitch = float(np.clip(cmd.neck_delta[1], -cfg.neck_rate, cfg.neck_rate))
    neck = geo.clamp_neck(state.neck.yaw + dyaw, state.neck.pitch + dpitch)
    # arm position, clamped straight-line speed
    tgt = cmd.arm_target
    delta = np.asarray(tgt.position, dtype=np.float64) - state.arm_pos
    dist = float(np.linalg.norm(delta))
    if dist > cfg.arm_speed:
        arm_pos = state.arm_pos + delta * (cfg.arm_speed / dist)
    else:
        arm_pos = state.arm_pos + delta
    arm_pos = np.clip(arm_pos, ARM_BOUNDS_LO, ARM_BOUNDS_HI)
    # orientation slerp with angular clamp; unusable targets hold orientation
    try:
        tgt_rot = geo.rot6_decode(tgt.rot6)
        arm_rot = geo.rotate_towards(state.arm_rot, tgt_rot, cfg.arm_turn_rate)
    except geo.DegenerateInput:
        arm_rot = state.arm_rot
    # gripper
    want = float(np.clip(tgt.gripper, 0.0, 1.0))
    dg = float(np.clip(want - state.grip, -cfg.grip_rate, cfg.grip_rate))
    grip = state.grip + dg
    # grasp state machine: edge-triggered on the 0.4 / 0.6 thresholds
    attached = state.attached
    object_pos = state.object_pos.copy()
    if (not attached and state.grip >= 0.4 and grip < 0.4
            and np.linalg.norm(arm_pos - state.object_pos) < cfg.grasp_radius):
        attached = True
    if attached and state.grip <= 0.6 and grip > 0.6:
        attached = False
        on_plate = np.linalg.norm(arm_pos[:2] - cfg.plate_center[:2]) <= cfg.plate_radius
        rest_z = cfg.object_radius + (cfg.plate_height if on_plate else 0.0)
        object_pos = np.array([arm_pos[0], arm_pos[1], rest_z])
    if attached:
        object_pos = arm_pos.copy()
    lifted = state.lifted or (attached and object_pos[2] >= cfg.lift_threshold)
    return replace(
        state,
        object_pos=object_pos,
        attached=attached,
        lifted=lifted,
        neck=neck,
        arm_pos=arm_pos,
        arm_rot=arm_rot,
        grip=grip,
        step_index=state.step_index + 1,
    )


def task_success(state: SceneState) -> bool:
    """Lifted above the threshold at some point AND resting within the plate
    radius at the end (still-attached objects are not resting)."""
    if state.attached or not state.lifted:
        return False
    d = np.linalg.norm(state.object_pos[:2] - state.config.plate_center[:2])
    return bool(d <= state.config.plate_radius)


# ---------------------------------------------------------------------------
# simulated eye tracker

def gaze_sigma(config: WorldConfig, ecc: float) -> float:
    """Pixel noise sigma as a hinge function of eccentricity."""
    e0 = config.gaze_hinge
    boost = config.gaze_kappa * max(0.0, ecc - e0) / (1.0 - e0)
    return config.gaze_sigma0 * config.width * (1.0 + boost)


def sample_gaze(state: SceneState, true_target, rng: np.random.Generator) -> GazeSample:
    """Simulate one eye-tracker reading aimed at a world point.

    Per eye: project; invalid if behind or off-image, otherwise perturb with
    isotropic Gaussian noise growing with eccentricity, then clamp into the
    image.  The sample is valid only if both eyes see the target; invalid
    samples carry the image center as a neutral filler."""
    cfg = state.config
    K = cfg.intrinsics
    poses = eye_poses(cfg, state.neck)
    coords = []
    ok = True
    for pose in poses:
        pix = geo.project_point(K, pose, true_target)
        if pix is None or not (0.0 <= pix[0] <= K.width and 0.0 <= pix[1] <= K.height):
            ok = False
            coords.append((K.cx, K.cy))
            continue
        ecc = math.hypot(pix[0] - K.cx, pix[1] - K.cy) / K.half_diagonal
        sigma = gaze_sigma(cfg, ecc)
        noisy = np.asarray(pix) + rng.normal(0.0, sigma, size=2)
        coords.append((
            float(np.clip(noisy[0], 0.0, K.width - 1)),
            float(np.clip(noisy[1], 0.0, K.height - 1)),
        ))
    if not ok:
        c = (K.cx, K.cy)
        return GazeSample(c, c, False)
    return GazeSample(coords[0], coords[1], True)


# ---------------------------------------------------------------------------
# rasterizer

DESK_COLOR = (44, 142, 62)
PLATE_COLOR = (192, 192, 198)
OBJECT_COLOR = (201, 38, 34)
BACKGROUND_COLOR = (18, 20, 26)
GRIPPER_OPEN_COLOR = (92, 122, 232)
GRIPPER_CLOSED_COLOR = (28, 40, 150)

# distractor palette: deliberately red-free
CLUTTER_PALETTE = [
    (70, 110, 200), (220, 190, 60), (120, 70, 190), (60, 180, 180),
    (230, 150, 40), (90, 170, 80), (170, 170, 170), (40, 90, 130),
    (200, 120, 180), (130, 130, 50), (80, 60, 110), (150, 200, 120),
]


@functools.lru_cache(maxsize=8)
def _clutter_boxes(config: WorldConfig):
    """Static distractor boxes on the floor, in side sectors outside the
    initial-pose view (rejection-sampled against the actual projection, so
    they only enter the frame when the neck turns)."""
    rng = np.random.default_rng(config.clutter_seed)
    K = config.intrinsics
    poses = eye_poses(config, config.initial_neck)
    boxes = []
    for i in range(config.clutter_count):
        side = 1.0 if i % 2 == 0 else -1.0
        for _ in range(100):
            azim = math.radians(rng.uniform(66.0, 110.0)) * side
            dist = rng.uniform(1.3, 2.3)
            half = rng.uniform(0.08, 0.16)
            center = np.array([
                config.rig_x + dist * math.sin(azim),
                config.rig_y + dist * math.cos(azim),
                config.floor_z + half + rng.uniform(0.0, 0.25),
            ])
            if not any(_billboard_visible(K, pose, center, half, margin=8.0)
                       for pose in poses):
                break
        boxes.append((center, half, CLUTTER_PALETTE[i % len(CLUTTER_PALETTE)]))
    return boxes


def _billboard_visible(K, pose, center, half, margin=0.0) -> bool:
    cam = pose.world_to_camera(center)[0]
    if cam[2] <= 1e-4:
        return False
    px = K.cx + K.fx * cam[0] / cam[2]
    py = K.cy + K.fy * cam[1] / cam[2]
    rx = K.fx * half / cam[2]
    ry = K.fy * half / cam[2]
    return (px + rx > -margin and px - rx < K.width + margin
            and py + ry > -margin and py - ry < K.height + margin)


@functools.lru_cache(maxsize=8)
def _pixel_grid(width: int, height: int):
    xs = (np.arange(width, dtype=np.float32) + 0.5)[None, :]
    ys = (np.arange(height, dtype=np.float32) + 0.5)[:, None]
    return np.broadcast_to(xs, (height, width)), np.broadcast_to(ys, (height, width))


def _clip_near(points_cam: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against the z=eps plane."""
    out = []
    n = len(points_cam)
    for i in range(n):
        a = points_cam[i]
        b = points_cam[(i + 1) % n]
        ain, bin_ = a[2] > eps, b[2] > eps
        if ain:
            out.append(a)
        if ain != bin_:
            t = (eps - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out) if out else np.empty((0, 3))


def _fill_polygon(img, K, pose, world_pts, color):
    cam = pose.world_to_camera(world_pts)
    cam = _clip_near(cam)
    if len(cam) < 3:
        return
    px = K.cx + K.fx * cam[:, 0] / cam[:, 2]
    py = K.cy + K.fy * cam[:, 1] / cam[:, 2]
    x0 = max(0, int(math.floor(px.min())))
    x1 = min(K.width, int(math.ceil(px.max())) + 1)
    y0 = max(0, int(math.floor(py.min())))
    y1 = min(K.height, int(math.ceil(py.max())) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    # consistent winding
    area = 0.0
    n = len(px)
    for i in range(n):
        j = (i + 1) % n
        area += px[i] * py[j] - px[j] * py[i]
    if area < 0:
        px, py = px[::-1], py[::-1]
    gx, gy = _pixel_grid(K.width, K.height)
    sx = gx[y0:y1, x0:x1]
    sy = gy[y0:y1, x0:x1]
    mask = np.ones(sx.shape, dtype=bool)
    for i in range(n):
        j = (i + 1) % n
        mask &= (sx - px[i]) * (py[j] - py[i]) - (sy - py[i]) * (px[j] - px[i]) <= 0.0
    img[y0:y1, x0:x1][mask] = color


def _fill_ellipse(img, K, pose, center, radius, color, square: bool = False):
    cam = pose.world_to_camera(center)[0]
    if cam[2] <= 1e-4:
        return
    px = K.cx + K.fx * cam[0] / cam[2]
    py = K.cy + K.fy * cam[1] / cam[2]
    rx = K.fx * radius / cam[2]
    ry = K.fy * radius / cam[2]
    x0 = max(0, int(math.floor(px - rx)))
    x1 = min(K.width, int(math.ceil(px + rx)) + 1)
    y0 = max(0, int(math.floor(py - ry)))
    y1 = min(K.height, int(math.ceil(py + ry)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    gx, gy = _pixel_grid(K.width, K.height)
    sx = gx[y0:y1, x0:x1]
    sy = gy[y0:y1, x0:x1]
    if square:
        mask = (np.abs(sx - px) <= rx) & (np.abs(sy - py) <= ry)
    else:
        mask = ((sx - px) / rx) ** 2 + ((sy - py) / ry) ** 2 <= 1.0
    img[y0:y1, x0:x1][mask] = color


def _circle_points(center, radius, z, n=16):
    ang = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang),
                     np.full(n, z)], axis=1)


def _render_eye(state: SceneState, pose: geo.CameraPose) -> np.ndarray:
    cfg = state.config
    K = cfg.intrinsics
    img = np.empty((cfg.height, cfg.width, 3), dtype=np.uint8)
    img[:] = BACKGROUND_COLOR

    def depth(point):
        return float(pose.world_to_camera(point)[0][2])

    # clutter first (farthest), then the desk plane, plate, then the movers
    boxes = _clutter_boxes(cfg)
    for center, half, color in sorted(boxes, key=lambda b: -depth(b[0])):
        _fill_ellipse(img, K, pose, center, half, color, square=True)

    hw = cfg.desk_width / 2
    desk = np.array([[-hw, 0.0, 0.0], [hw, 0.0, 0.0],
                     [hw, cfg.desk_depth, 0.0], [-hw, cfg.desk_depth, 0.0]])
    _fill_polygon(img, K, pose, desk, DESK_COLOR)
    _fill_polygon(img, K, pose,
                  _circle_points(cfg.plate_center, cfg.plate_radius, cfg.plate_height),
                  PLATE_COLOR)

    g = state.grip
    grip_color = tuple(int(round(c0 + (c1 - c0) * g))
                       for c0, c1 in zip(GRIPPER_CLOSED_COLOR, GRIPPER_OPEN_COLOR))
    movers = [
        (state.object_pos, cfg.object_radius, OBJECT_COLOR, False),
        (state.arm_pos, 0.02, grip_color, False),
    ]
    for center, radius, color, sq in sorted(movers, key=lambda mv: -depth(mv[0])):
        _fill_ellipse(img, K, pose, center, radius, color, square=sq)
    return img


def render(state: SceneState) -> StereoFrame:
    """Deterministic flat-shaded stereo render of the scene."""
    left_pose, right_pose = eye_poses(state.config, state.neck)
    return StereoFrame(
        left=_render_eye(state, left_pose),
        right=_render_eye(state, right_pose),
        left_pose=left_pose,
        right_pose=right_pose,
    )
