"""Gaze pipeline (coarse patch -> foveal crop -> fine offset -> composed
pixel), temporal ensembling of action chunks, and the closed-loop policy
runner.

Pixel bookkeeping: crops are integer windows.  A crop window is centered on
the patch center (or predicted gaze), rounded half-up, then shifted inward
when it would cross the image border; the actual origin is returned so the
composition can invert the pipeline exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import data
from . import models as mdl
from . import nn
from . import world


class EmptyBuffer(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# patch / crop arithmetic

def patch_center(i: int, size: int, grid: int) -> float:
    return size * (i + 0.5) / grid


def patch_index_of(x: float, size: int, grid: int) -> int:
    return min(int(x * grid / size), grid - 1)


def crop_origin_1d(center: float, crop: int, size: int) -> int:
    """Integer window start: round-half-up then shift inside the image."""
    o = int(math.floor(center - crop / 2.0 + 0.5))
    return max(0, min(o, size - crop))


def crop_window(image: np.ndarray, ox: int, oy: int, crop: int) -> np.ndarray:
    return image[oy:oy + crop, ox:ox + crop]


def crop_patch_region(image: np.ndarray, i: int, j: int, crop: int,
                      grid: int = mdl.GRID):
    """Crop centered on patch (i, j); returns (crop_pixels, (ox, oy))."""
    h, w = image.shape[:2]
    if crop > min(w, h):
        raise ValueError(f"crop {crop} exceeds image {w}x{h}")
    ox = crop_origin_1d(patch_center(i, w, grid), crop, w)
    oy = crop_origin_1d(patch_center(j, h, grid), crop, h)
    return crop_window(image, ox, oy, crop), (ox, oy)


def foveate(image: np.ndarray, gaze_xy, crop: int):
    """Crop centered on a predicted gaze pixel, border-shifted like
    crop_patch_region; returns (crop_pixels, (ox, oy))."""
    h, w = image.shape[:2]
    if crop > min(w, h):
        raise ValueError(f"crop {crop} exceeds image {w}x{h}")
    ox = crop_origin_1d(float(gaze_xy[0]), crop, w)
    oy = crop_origin_1d(float(gaze_xy[1]), crop, h)
    return crop_window(image, ox, oy, crop), (ox, oy)


def compose_gaze(i: int, j: int, x_crop: float, y_crop: float,
                 width: int, height: int, crop: int, grid: int = mdl.GRID,
                 crop_origin=None, clamp: bool = True):
    """Full-image gaze pixel from (patch, in-crop coordinates).

    With crop_origin=None this evaluates the raw patch-center formula
    x = W(i+0.5)/G + (x_crop - C/2); given the actual integer crop origin it
    returns origin + in-crop coordinate, which inverts the crop pipeline
    exactly (border shifts and rounding included).
    """
    if crop_origin is None:
        x = patch_center(i, width, grid) + (x_crop - crop / 2.0)
        y = patch_center(j, height, grid) + (y_crop - crop / 2.0)
    else:
        x = crop_origin[0] + x_crop
        y = crop_origin[1] + y_crop
    if clamp:
        x = min(max(x, 0.0), width - 1.0)
        y = min(max(y, 0.0), height - 1.0)
    return x, y


@dataclass(frozen=True)
class GazeGridPrediction:
    probs: np.ndarray  # (G*G,), sums to 1
    i: int  # horizontal patch index
    j: int  # vertical patch index


def coarse_prediction(logits: np.ndarray, grid: int = mdl.GRID) -> GazeGridPrediction:
    """Softmax + argmax patch selection; ties go to the smallest linear
    index (row-major j*G+i), which is what np.argmax returns."""
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    flat = int(np.argmax(p))
    return GazeGridPrediction(p, i=flat % grid, j=flat // grid)


@dataclass(frozen=True)
class GazeFinePrediction:
    x_crop: float
    y_crop: float


# ---------------------------------------------------------------------------
# temporal ensemble

@dataclass
class EnsembleBuffer:
    """Ring of (issue_step, chunk) pairs; only chunks still overlapping the
    current step within the execution window are kept."""

    window: int = 10
    items: list = field(default_factory=list)

    def push(self, issue_step: int, chunk: np.ndarray) -> None:
        self.items.append((issue_step, np.asarray(chunk, dtype=np.float64)))
        self.prune(issue_step)

    def prune(self, t: int) -> None:
        self.items = [(s, c) for (s, c) in self.items
                      if 0 <= t - s < min(self.window, len(c))]

    def clear(self) -> None:
        self.items.clear()


def temporal_ensemble(buffer: EnsembleBuffer, t: int, decay: float = 0.1) -> np.ndarray:
    """Exponentially weighted blend of every chunk's row for step t, with
    w = exp(-decay * age), age = t - issue_step."""
    num = None
    den = 0.0
    for issue, chunk in buffer.items:
        age = t - issue
        if not (0 <= age < min(buffer.window, len(chunk))):
            continue
        w = math.exp(-decay * age)
        contrib = w * chunk[age]
        num = contrib if num is None else num + contrib
        den += w
    if num is None:
        raise EmptyBuffer(f"no chunk covers step {t}")
    return num / den


# ---------------------------------------------------------------------------
# closed-loop runner

def predict_gaze_pixel(policies: mdl.PolicySet, img_raw: np.ndarray):
    """Coarse -> crop -> fine -> compose for one eye image. Returns
    ((x, y), coarse_pred, fine_pred, crop_raw, origin)."""
    cfg = policies.gaze_coarse.cfg
    h, w = img_raw.shape[:2]
    coarse = coarse_prediction(policies.gaze_coarse.logits(img_raw), cfg.grid)
    crop_raw, origin = crop_patch_region(img_raw, coarse.i, coarse.j, cfg.crop, cfg.grid)
    xy_crop = policies.gaze_fine.predict(crop_raw)
    fine = GazeFinePrediction(float(xy_crop[0]), float(xy_crop[1]))
    gaze = compose_gaze(coarse.i, coarse.j, fine.x_crop, fine.y_crop,
                        w, h, cfg.crop, cfg.grid, crop_origin=origin)
    return gaze, coarse, fine, crop_raw, origin


def robot_state_vector(state: world.SceneState, gaze4: np.ndarray, mode: str) -> np.ndarray:
    parts = [state.arm_state.flat(), np.asarray(gaze4, dtype=np.float32)]
    if mode == mdl.WITH_NECK:
        parts.append(np.array([state.neck.yaw, state.neck.pitch], dtype=np.float32))
    return np.concatenate(parts)


@dataclass
class PolicyStepTrace:
    gaze: np.ndarray  # (4,) predicted gaze pixels (lx, ly, rx, ry)
    neck_delta: tuple
    arm_target: np.ndarray  # (10,)


def run_policy_episode(policies: mdl.PolicySet, scene: world.SceneState, mode: str,
                       steps: int | None = None, keep_frames: bool = False):
    """Closed loop at the control rate: render -> (neck chunk) -> gaze ->
    foveate -> action chunk -> temporal ensembles -> step.

    Inference is deterministic (z = 0, no sampling).  Returns
    (records, success, traces[, frames])."""
    policies.validate(mode)
    cfg = scene.config
    pcfg = policies.act.cfg
    if (pcfg.width, pcfg.height) != (cfg.width, cfg.height):
        raise mdl.ModelMismatch(
            f"checkpoints trained at {pcfg.width}x{pcfg.height}, "
            f"world is {cfg.width}x{cfg.height}")
    n_steps = cfg.episode_length if steps is None else steps
    neck_buf = EnsembleBuffer(window=pcfg.exec_window)
    act_buf = EnsembleBuffer(window=pcfg.exec_window)
    state = scene
    records = []
    traces = []
    frames = [] if keep_frames else None
    for t in range(n_steps):
        frame = world.render(state)
        if keep_frames:
            frames.append(frame)
        if mode == mdl.WITH_NECK:
            neck_buf.push(t, policies.neck.predict_chunk(frame.left, frame.right))
            neck_delta = tuple(temporal_ensemble(neck_buf, t, pcfg.ensemble_decay))
        else:
            neck_delta = (0.0, 0.0)
        gaze_l, *_ = predict_gaze_pixel(policies, frame.left)
        if pcfg.gaze_left_eye_only:
            gaze_r = gaze_l
        else:
            gaze_r, *_ = predict_gaze_pixel(policies, frame.right)
        gaze4 = np.array([*gaze_l, *gaze_r], dtype=np.float32)
        crop_l, _ = foveate(frame.left, gaze_l, pcfg.crop)
        crop_r, _ = foveate(frame.right, gaze_r, pcfg.crop)
        stvec = robot_state_vector(state, gaze4, mode)
        act_buf.push(t, policies.act.predict_chunk(crop_l, crop_r, stvec))
        arm_flat = temporal_ensemble(act_buf, t, pcfg.ensemble_decay)
        cmd = world.Command(neck_delta, world.ArmState.from_flat(arm_flat))
        records.append(data.StepRecord(
            i=t,
            neck=[state.neck.yaw, state.neck.pitch],
            arm=[float(v) for v in state.arm_state.flat()],
            gaze=[float(v) for v in gaze4],
            gaze_valid=True,
            cmd_neck=list(neck_delta),
            cmd_arm=[float(v) for v in arm_flat],
        ))
        traces.append(PolicyStepTrace(gaze4, neck_delta, np.asarray(arm_flat)))
        state = world.step(state, cmd)
    success = world.task_success(state)
    if keep_frames:
        return records, success, traces, frames
    return records, success, traces


def replay_episode(ep_dir: str, check_frames: bool = True):
    """Re-run a recorded episode through the simulator from its stored
    initial conditions by applying the recorded commands; verifies the
    renders match frames.bin bit-exactly when check_frames is set.

    Returns (meta, success, max_frame_mismatch_step or None)."""
    meta, records, frames = data.read_episode(ep_dir, mmap_frames=True)
    cfg = world.WorldConfig(**meta.config)
    state = world.new_scene(cfg, position=meta.object_pos, seed=meta.seed)
    mismatch = None
    for t, rec in enumerate(records):
        if check_frames:
            frame = world.render(state)
            if not (np.array_equal(frame.left, frames[t, 0])
                    and np.array_equal(frame.right, frames[t, 1])):
                mismatch = t
                break
        cmd = world.Command(tuple(rec.cmd_neck), world.ArmState.from_flat(rec.cmd_arm))
        state = world.step(state, cmd)
    return meta, world.task_success(state), mismatch
