"""Camera and rotation geometry for the active-neck rig.

Conventions used throughout the package:

* World frame: x points to the robot's right, y points forward (into the
  desk), z points up.  The desk surface is the z=0 plane.
* Camera frame: x right, y down, z forward (pinhole looks along +z), so a
  pixel is (cx + fx*X/Z, cy + fy*Y/Z) with continuous image coordinates
  spanning [0, W] x [0, H].
* Neck: positive yaw turns the camera toward the robot's right; pitch is
  negative downward, 0 is level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

YAW_LIMIT = 1.2
PITCH_MIN = -1.2
PITCH_MAX = 0.0

_EPS_BEHIND = 1e-6
_EPS_DEGENERATE = 1e-12


class DegenerateInput(ValueError):
    """6-D rotation input cannot be orthonormalized (caller should hold the
    previous orientation)."""


class InvalidFov(ValueError):
    pass


class LimitExceeded(ValueError):
    pass


class PartiallyBehind(ValueError):
    """At least one projected point has nonpositive depth."""


# Base orientation of the camera when the neck is at (0, 0): looking along
# +y world, image-down = -z world.  Columns are the camera axes in world.
BASE_ORIENTATION = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, -1.0, 0.0],
    ]
)


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation_matrix(mat: np.ndarray, tol: float = 1e-9) -> bool:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (3, 3):
        return False
    if not np.all(np.isfinite(mat)):
        return False
    if np.max(np.abs(mat.T @ mat - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(mat) - 1.0) <= tol


def rot6_decode(v) -> np.ndarray:
    """Gram-Schmidt a 6-vector (two raw column hints) into a rotation matrix.

    Raises DegenerateInput when the first hint is (near) zero or the second
    is (near) parallel to the first.
    """
    v = np.asarray(v, dtype=np.float64).reshape(6)
    a1, a2 = v[:3], v[3:]
    n1 = np.linalg.norm(a1)
    if n1 < _EPS_DEGENERATE:
        raise DegenerateInput("first column hint has near-zero norm")
    b1 = a1 / n1
    a2_orth = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(a2_orth)
    if n2 < _EPS_DEGENERATE:
        raise DegenerateInput("column hints are (near) parallel")
    b2 = a2_orth / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def rot6_encode(mat: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, flattened to 6 numbers."""
    mat = np.asarray(mat, dtype=np.float64)
    return np.concatenate([mat[:, 0], mat[:, 1]])


def rotation_angle(mat: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    tr = float(np.trace(mat))
    return math.acos(min(1.0, max(-1.0, (tr - 1.0) / 2.0)))


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues formula for a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    kx, ky, kz = axis
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotate_towards(current: np.ndarray, target: np.ndarray, max_step: float) -> np.ndarray:
    """Step `current` toward `target` along the geodesic, at most `max_step` rad."""
    rel = current.T @ target
    ang = rotation_angle(rel)
    if ang <= max_step or ang < 1e-12:
        return target.copy()
    # axis of rel from its skew part
    ax = np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    n = np.linalg.norm(ax)
    if n < 1e-12:  # 180 degree case: pick any orthogonal axis
        ax = np.linalg.svd(rel - np.eye(3))[2][-1]
    else:
        ax = ax / n
    return current @ axis_angle_matrix(ax, max_step)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    hfov: float
    vfov: float
    fx: float
    fy: float
    cx: float
    cy: float

    @property
    def half_diagonal(self) -> float:
        return math.hypot(self.cx, self.cy)


def make_intrinsics(width: int, height: int, hfov: float, vfov: float) -> CameraIntrinsics:
    """Pinhole intrinsics from image size and field of view (radians)."""
    if width <= 0 or height <= 0:
        raise InvalidFov(f"image size must be positive, got {width}x{height}")
    if not (0.0 < hfov < math.pi) or not (0.0 < vfov < math.pi):
        raise InvalidFov(f"fov must be in (0, pi), got hfov={hfov} vfov={vfov}")
    fx = width / (2.0 * math.tan(hfov / 2.0))
    fy = height / (2.0 * math.tan(vfov / 2.0))
    return CameraIntrinsics(width, height, hfov, vfov, fx, fy, width / 2.0, height / 2.0)


@dataclass(frozen=True)
class NeckPose:
    yaw: float
    pitch: float

    def __post_init__(self):
        if abs(self.yaw) > YAW_LIMIT + 1e-12:
            raise LimitExceeded(f"yaw {self.yaw} outside [-{YAW_LIMIT}, {YAW_LIMIT}]")
        if not (PITCH_MIN - 1e-12 <= self.pitch <= PITCH_MAX + 1e-12):
            raise LimitExceeded(f"pitch {self.pitch} outside [{PITCH_MIN}, {PITCH_MAX}]")


def clamp_neck(yaw: float, pitch: float) -> NeckPose:
    return NeckPose(
        min(YAW_LIMIT, max(-YAW_LIMIT, yaw)),
        min(PITCH_MAX, max(PITCH_MIN, pitch)),
    )


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray  # (3,) world
    orientation: np.ndarray  # (3,3) world <- camera

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (pts - self.position) @ self.orientation


def neck_to_camera_pose(neck: NeckPose, rig_position) -> CameraPose:
    """2-DOF neck: yaw about world-z then pitch about the yawed x axis.

    The neck rotates in place; the camera stays at the rig point.
    """
    orientation = rot_z(-neck.yaw) @ rot_x(neck.pitch) @ BASE_ORIENTATION
    return CameraPose(np.asarray(rig_position, dtype=np.float64).copy(), orientation)


def project_point(K: CameraIntrinsics, pose: CameraPose, point):
    """Project one world point; returns (x, y) in continuous pixels or None
    when the point is at or behind the camera plane."""
    pc = pose.world_to_camera(point)[0]
    if pc[2] <= _EPS_BEHIND:
        return None
    return (
        K.cx + K.fx * pc[0] / pc[2],
        K.cy + K.fy * pc[1] / pc[2],
    )


def project_points(K: CameraIntrinsics, pose: CameraPose, points: np.ndarray):
    """Vectorized projection. Returns (pixels (N,2), depths (N,))."""
    pc = pose.world_to_camera(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = K.cx + K.fx * pc[:, 0] / z
        py = K.cy + K.fy * pc[:, 1] / z
    return np.stack([px, py], axis=1), z


# View-status labels for a sphere against the frustum.
IN_VIEW = "InView"
PARTIAL = "Partial"
OUTSIDE = "Outside"


def _frustum_normals(K: CameraIntrinsics) -> np.ndarray:
    """Inward unit normals of the four side planes, camera frame."""
    th = math.tan(K.hfov / 2.0)
    tv = math.tan(K.vfov / 2.0)
    ns = np.array(
        [
            [-1.0, 0.0, th],  # right plane (X <= th*Z inside)
            [1.0, 0.0, th],  # left
            [0.0, -1.0, tv],  # bottom (Y <= tv*Z)
            [0.0, 1.0, tv],  # top
        ]
    )
    return ns / np.linalg.norm(ns, axis=1, keepdims=True)


def sphere_view_status(K: CameraIntrinsics, pose: CameraPose, center, radius: float) -> str:
    """Classify a sphere as InView / Partial / Outside.

    InView: the rendered disc fits entirely inside the image rectangle.
    Outside: the sphere misses the view frustum entirely (per-plane test).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pc = pose.world_to_camera(center)[0]
    if pc[2] < -radius:
        return OUTSIDE
    for n in _frustum_normals(K):
        if float(np.dot(n, pc)) < -radius:
            return OUTSIDE
    if pc[2] > _EPS_BEHIND:
        px = K.cx + K.fx * pc[0] / pc[2]
        py = K.cy + K.fy * pc[1] / pc[2]
        rx = K.fx * radius / pc[2]
        ry = K.fy * radius / pc[2]
        if px - rx >= 0 and px + rx <= K.width and py - ry >= 0 and py + ry <= K.height:
            return IN_VIEW
    return PARTIAL


@dataclass(frozen=True)
class VirtualPlane:
    """Frame-projection plane anchored to the *camera* orientation.

    half_width/half_height follow the FOV sizing rule, so the plane subtends
    exactly the camera's field of view from the eye point.
    """

    center: np.ndarray
    orientation: np.ndarray
    half_width: float
    half_height: float
    distance: float

    def corners(self) -> np.ndarray:
        """World-frame corners, image order: TL, TR, BR, BL."""
        x = self.orientation[:, 0]
        y = self.orientation[:, 1]
        return np.array(
            [
                self.center - self.half_width * x - self.half_height * y,
                self.center + self.half_width * x - self.half_height * y,
                self.center + self.half_width * x + self.half_height * y,
                self.center - self.half_width * x + self.half_height * y,
            ]
        )

    def eye_position(self) -> np.ndarray:
        return self.center - self.orientation @ np.array([0.0, 0.0, self.distance])


def decoupled_plane(camera_orientation: np.ndarray, eye_position, distance: float,
                    K: CameraIntrinsics) -> VirtualPlane:
    """Place the projection plane `distance` ahead of the eye along the
    camera's forward axis.  Depends on the camera orientation only — never on
    the viewer's head pose; that independence is the decoupling."""
    if distance <= 0:
        raise ValueError("plane distance must be positive")
    eye = np.asarray(eye_position, dtype=np.float64)
    center = eye + camera_orientation @ np.array([0.0, 0.0, distance])
    return VirtualPlane(
        center=center,
        orientation=np.array(camera_orientation, dtype=np.float64),
        half_width=distance * math.tan(K.hfov / 2.0),
        half_height=distance * math.tan(K.vfov / 2.0),
        distance=distance,
    )


def plane_corners_in_head_view(plane: VirtualPlane, head_orientation: np.ndarray,
                               K_display: CameraIntrinsics) -> np.ndarray:
    """Project the plane's corners through a display camera at the eye point
    with the head's orientation: the render transform the teleop UI applies.

    Returns a (4, 2) pixel array (TL, TR, BR, BL); raises PartiallyBehind if
    any corner has nonpositive depth (the UI clips in that case).
    """
    head_pose = CameraPose(plane.eye_position(), np.asarray(head_orientation, dtype=np.float64))
    pix, z = project_points(K_display, head_pose, plane.corners())
    if np.any(z <= _EPS_BEHIND):
        raise PartiallyBehind("plane corner behind the display camera")
    return pix
