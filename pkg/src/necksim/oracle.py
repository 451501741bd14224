"""Scripted demonstrator standing in for the human teleoperator.

Phases are condition-gated (not time-scripted): approach above the object,
descend, close, lift, carry over the plate, release, then hold.  In
with-neck mode a proportional controller steers the camera toward the
current gaze target; in no-neck mode the neck never moves and fully
out-of-view placements are rejected at generation time (the paper's
dataset-construction rule).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import data
from . import geometry as geo
from . import world

WITH_NECK = "with-neck"
NO_NECK = "no-neck"


class OracleFailure(RuntimeError):
    """Retries exhausted while generating a demonstration — the world config
    is likely mis-tuned."""


@dataclass(frozen=True)
class OracleParams:
    neck_gain: float = 0.5
    hover_height: float = 0.12
    grasp_height: float = 0.04
    lift_height: float = 0.18
    xy_tol: float = 0.012
    carry_tol: float = 0.02
    gaze_carry_plate: bool = True  # plate-directed gaze while carrying
    wait_for_gaze: bool = True  # with-neck: look before reaching
    # per-episode style ranges; decorrelate phase from elapsed time so the
    # learner must condition on geometry rather than on a schedule
    speed_range: tuple = (0.55, 1.0)
    dwell_range: tuple = (0, 5)  # hover steps above the object before descending
    hover_jitter: float = 0.02
    gain_jitter: float = 0.15


@dataclass(frozen=True)
class EpisodeStyle:
    """Per-episode draw of the oracle's pacing."""
    speed: float = 1.0
    dwell: int = 0
    hover: float = 0.12
    neck_gain: float = 0.5

    @classmethod
    def draw(cls, params: OracleParams, rng: np.random.Generator) -> "EpisodeStyle":
        return cls(
            speed=float(rng.uniform(*params.speed_range)),
            dwell=int(rng.integers(params.dwell_range[0], params.dwell_range[1] + 1)),
            hover=float(params.hover_height + rng.uniform(-1, 1) * params.hover_jitter),
            neck_gain=float(params.neck_gain + rng.uniform(-1, 1) * params.gain_jitter),
        )


def ideal_neck_angles(config: world.WorldConfig, target) -> tuple:
    """Neck angles that would center `target`, clamped to the joint limits."""
    d = np.asarray(target, dtype=np.float64) - config.rig_position
    yaw = math.atan2(d[0], d[1])
    pitch = math.atan2(d[2], math.hypot(d[0], d[1]))
    return (
        float(np.clip(yaw, -geo.YAW_LIMIT, geo.YAW_LIMIT)),
        float(np.clip(pitch, geo.PITCH_MIN, geo.PITCH_MAX)),
    )


def _creep(current: np.ndarray, waypoint: np.ndarray, step: float) -> np.ndarray:
    """Waypoint at most `step` ahead of the arm, so slow styles pace the
    approach below the simulator's speed clamp."""
    d = waypoint - current
    dist = float(np.linalg.norm(d))
    if dist <= step:
        return waypoint
    return current + d * (step / dist)


def oracle_command(state: world.SceneState, mode: str,
                   params: OracleParams = OracleParams(),
                   style: EpisodeStyle = EpisodeStyle(),
                   hold_arm: bool = False, force_hover: bool = False):
    """One control decision.  Returns (Command, phase, gaze_target)."""
    cfg = state.config
    rot6 = geo.rot6_encode(world.HOME_ROT)
    plate = cfg.plate_center
    obj = state.object_pos
    pace = style.speed * cfg.arm_speed

    def towards(waypoint, grip):
        return world.ArmState(_creep(state.arm_pos, np.asarray(waypoint), pace),
                              rot6, grip)

    if state.attached:
        if np.linalg.norm(state.arm_pos[:2] - plate[:2]) <= params.carry_tol:
            phase = "release"
            arm = world.ArmState(state.arm_pos.copy(), rot6, 1.0)
        elif state.arm_pos[2] < params.lift_height - 0.01:
            phase = "lift"
            arm = towards([state.arm_pos[0], state.arm_pos[1], params.lift_height], 0.0)
        else:
            phase = "carry"
            arm = towards([plate[0], plate[1], params.lift_height], 0.0)
        gaze_target = plate.copy() if params.gaze_carry_plate else obj.copy()
    elif state.lifted:
        # object already delivered (or dropped): hold position
        phase = "done"
        arm = world.ArmState(state.arm_pos.copy(), rot6, 1.0)
        gaze_target = plate.copy()
    else:
        gaze_target = obj.copy()
        if hold_arm:
            phase = "look"
            arm = world.ArmState(
                np.array([cfg.home_x, cfg.home_y, cfg.home_z]), rot6, 1.0)
        elif np.linalg.norm(state.arm_pos[:2] - obj[:2]) > params.xy_tol:
            phase = "approach"
            arm = towards([obj[0], obj[1], style.hover], 1.0)
        elif force_hover:
            phase = "dwell"
            arm = world.ArmState(np.array([obj[0], obj[1], style.hover]), rot6, 1.0)
        elif state.arm_pos[2] > params.grasp_height + 0.005:
            phase = "descend"
            arm = towards([obj[0], obj[1], params.grasp_height], 1.0)
        else:
            phase = "close"
            arm = world.ArmState(state.arm_pos.copy(), rot6, 0.0)

    if mode == WITH_NECK:
        yaw_t, pitch_t = ideal_neck_angles(cfg, gaze_target)
        dyaw = float(np.clip(style.neck_gain * (yaw_t - state.neck.yaw),
                             -cfg.neck_rate, cfg.neck_rate))
        dpitch = float(np.clip(style.neck_gain * (pitch_t - state.neck.pitch),
                               -cfg.neck_rate, cfg.neck_rate))
        neck_delta = (dyaw, dpitch)
    elif mode == NO_NECK:
        neck_delta = (0.0, 0.0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return world.Command(neck_delta, arm), phase, gaze_target


@dataclass
class EpisodeRollout:
    records: list
    frames: np.ndarray | None  # uint8 (T, 2, H, W, 3) when rendered
    success: bool
    initial: world.SceneState
    final: world.SceneState


def run_oracle_episode(config: world.WorldConfig, position, seed: int, mode: str,
                       params: OracleParams = OracleParams(),
                       record_frames: bool = True,
                       steps: int | None = None) -> EpisodeRollout:
    """Roll the oracle through one full episode and record the dataset rows."""
    state = world.new_scene(config, position=position, seed=seed)
    initial = state
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9A2E)))
    style = EpisodeStyle.draw(params, rng)
    n_steps = config.episode_length if steps is None else steps
    records = []
    frames = (np.empty((n_steps, 2, config.height, config.width, 3), dtype=np.uint8)
              if record_frames else None)
    saw_object = False
    dwell_left = style.dwell
    for t in range(n_steps):
        # peek at the phase to aim the gaze, then gate the arm on visibility
        _, phase, gaze_target = oracle_command(state, mode, params, style)
        gaze = world.sample_gaze(state, gaze_target, rng)
        if phase in ("approach", "descend", "close", "look") and gaze.valid:
            saw_object = True
        hold = (mode == WITH_NECK and params.wait_for_gaze and not saw_object
                and not state.attached and not state.lifted)
        hover = phase in ("descend", "dwell") and dwell_left > 0
        cmd, phase, _ = oracle_command(state, mode, params, style,
                                       hold_arm=hold, force_hover=hover)
        if phase == "dwell":
            dwell_left -= 1
        if record_frames:
            frame = world.render(state)
            frames[t, 0] = frame.left
            frames[t, 1] = frame.right
        records.append(data.StepRecord(
            i=t,
            neck=[state.neck.yaw, state.neck.pitch],
            arm=[float(v) for v in state.arm_state.flat()],
            gaze=[float(v) for v in gaze.flat()],
            gaze_valid=gaze.valid,
            cmd_neck=list(cmd.neck_delta),
            cmd_arm=[float(v) for v in cmd.arm_target.flat()],
        ))
        state = world.step(state, cmd)
    return EpisodeRollout(records, frames, world.task_success(state), initial, state)


def sample_position(config: world.WorldConfig, rng: np.random.Generator) -> np.ndarray:
    x0, x1, y0, y1 = world.place_area(config)
    return rng.uniform([x0, y0], [x1, y1])


def generate_demos(config: world.WorldConfig, n: int, mode: str, seed: int,
                   out_dir: str, params: OracleParams = OracleParams(),
                   max_retries: int = 3, name: str | None = None) -> str:
    """Generate `n` successful demonstrations into the dataset layout.

    no-neck mode resamples placements that are fully outside the initial
    view; failures retry with a fresh seed offset up to `max_retries` before
    raising OracleFailure.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    if mode not in (WITH_NECK, NO_NECK):
        raise ValueError(f"unknown mode {mode!r}")
    os.makedirs(out_dir, exist_ok=True)
    for i in range(n):
        for attempt in range(max_retries + 1):
            rng = np.random.default_rng(np.random.SeedSequence((seed, i, attempt)))
            pos = sample_position(config, rng)
            if mode == NO_NECK:
                while world.object_view_label(
                        config, np.array([pos[0], pos[1], config.object_radius]),
                        config.initial_neck) == geo.OUTSIDE:
                    pos = sample_position(config, rng)
            ep_seed = int(rng.integers(0, 2 ** 31 - 1))
            rollout = run_oracle_episode(config, pos, ep_seed, mode, params)
            if rollout.success:
                break
        else:
            raise OracleFailure(
                f"episode {i}: no success in {max_retries + 1} attempts — "
                f"world config appears unsolvable")
        ep_id = data.episode_dirname(i)
        label = world.object_view_label(
            config, rollout.initial.object_pos, config.initial_neck)
        meta = data.EpisodeMeta(
            episode_id=ep_id, with_neck=(mode == WITH_NECK), seed=ep_seed,
            width=config.width, height=config.height, steps=len(rollout.records),
            success=True, object_cell=None,
            object_pos=[float(pos[0]), float(pos[1])],
            view_label=label, config=config.as_dict(),
        )
        data.write_episode(os.path.join(out_dir, ep_id), meta, rollout.records,
                           rollout.frames)
    data.write_manifest(out_dir, name or os.path.basename(out_dir),
                        mode == WITH_NECK, config.config_hash(),
                        config.width, config.height)
    return out_dir
