"""Episode recording format and train/test splitting.

Directory layout (all field names are part of the on-disk contract):

    dataset/<name>/
        manifest.json                 dataset-level metadata
        episode_00000/
            meta.json                 EpisodeMeta as UTF-8 JSON
            steps.jsonl               one StepRecord object per line
            frames.bin                raw bytes; per step: left then right
                                      raster, row-major RGB8, no padding

steps.jsonl keys: i, neck[2], arm[10], gaze[4], gaze_valid, cmd_neck[2],
cmd_arm[10].  frames.bin length is steps * 2 * W * H * 3 bytes exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np


class FormatError(ValueError):
    pass


class TooFewEpisodes(ValueError):
    pass


@dataclass
class StepRecord:
    i: int
    neck: list  # [yaw, pitch]
    arm: list  # 10 floats: position(3) + rot6(6) + gripper
    gaze: list  # 4 floats: left xy, right xy (pixels)
    gaze_valid: bool
    cmd_neck: list  # commanded [dyaw, dpitch]
    cmd_arm: list  # commanded target arm state, 10 floats

    def validate(self):
        if len(self.neck) != 2 or len(self.arm) != 10 or len(self.gaze) != 4 \
                or len(self.cmd_neck) != 2 or len(self.cmd_arm) != 10:
            raise FormatError(f"step {self.i}: wrong field lengths")


@dataclass
class EpisodeMeta:
    episode_id: str
    with_neck: bool
    seed: int
    width: int
    height: int
    steps: int
    success: bool
    object_cell: str | None = None
    object_pos: list | None = None
    view_label: str | None = None
    config: dict = field(default_factory=dict)


def frame_nbytes(meta: EpisodeMeta) -> int:
    return meta.steps * 2 * meta.width * meta.height * 3


def write_episode(ep_dir: str, meta: EpisodeMeta, records, frames: np.ndarray) -> None:
    """Persist one episode.  `frames` is uint8 (steps, 2, H, W, 3)."""
    if len(records) != meta.steps:
        raise FormatError(f"{meta.steps} steps in meta but {len(records)} records")
    expected = (meta.steps, 2, meta.height, meta.width, 3)
    if frames.dtype != np.uint8 or frames.shape != expected:
        raise FormatError(f"frames must be uint8 {expected}, got {frames.dtype} {frames.shape}")
    os.makedirs(ep_dir, exist_ok=True)
    with open(os.path.join(ep_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(asdict(meta), f, indent=1, sort_keys=True)
    with open(os.path.join(ep_dir, "steps.jsonl"), "w", encoding="utf-8") as f:
        for rec in records:
            rec.validate()
            f.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    with open(os.path.join(ep_dir, "frames.bin"), "wb") as f:
        f.write(np.ascontiguousarray(frames).tobytes())


def read_meta(ep_dir: str) -> EpisodeMeta:
    with open(os.path.join(ep_dir, "meta.json"), "r", encoding="utf-8") as f:
        return EpisodeMeta(**json.load(f))


def read_records(ep_dir: str, meta: EpisodeMeta):
    records = []
    with open(os.path.join(ep_dir, "steps.jsonl"), "r", encoding="utf-8") as f:
        for n, line in enumerate(f):
            rec = StepRecord(**json.loads(line))
            rec.validate()
            records.append(rec)
    if len(records) != meta.steps:
        raise FormatError(f"{ep_dir}: meta says {meta.steps} steps, "
                          f"steps.jsonl has {len(records)}")
    return records


def read_frames(ep_dir: str, meta: EpisodeMeta, mmap: bool = False) -> np.ndarray:
    path = os.path.join(ep_dir, "frames.bin")
    expected = frame_nbytes(meta)
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {actual} "
            f"(mismatch at byte offset {min(expected, actual)})")
    shape = (meta.steps, 2, meta.height, meta.width, 3)
    if mmap:
        return np.memmap(path, dtype=np.uint8, mode="r", shape=shape)
    return np.fromfile(path, dtype=np.uint8).reshape(shape)


def read_episode(ep_dir: str, mmap_frames: bool = False):
    """Exact inverse of write_episode: (meta, records, frames)."""
    meta = read_meta(ep_dir)
    records = read_records(ep_dir, meta)
    frames = read_frames(ep_dir, meta, mmap=mmap_frames)
    return meta, records, frames


def episode_dirname(index: int) -> str:
    return f"episode_{index:05d}"


def list_episodes(dataset_dir: str):
    names = sorted(n for n in os.listdir(dataset_dir)
                   if n.startswith("episode_")
                   and os.path.isdir(os.path.join(dataset_dir, n)))
    return names


def write_manifest(dataset_dir: str, name: str, with_neck: bool, config_hash: str,
                   width: int, height: int) -> None:
    episodes = list_episodes(dataset_dir)
    manifest = {
        "name": name,
        "episodes": len(episodes),
        "with_neck": with_neck,
        "config_hash": config_hash,
        "width": width,
        "height": height,
    }
    with open(os.path.join(dataset_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def read_manifest(dataset_dir: str) -> dict:
    with open(os.path.join(dataset_dir, "manifest.json"), "r", encoding="utf-8") as f:
        return json.load(f)


def split(dataset_dir: str, train_fraction: float = 0.9, seed: int = 0):
    """Deterministic shuffled split; train gets floor(fraction * N)."""
    names = list_episodes(dataset_dir)
    if len(names) < 2:
        raise TooFewEpisodes(f"{dataset_dir}: need at least 2 episodes, found {len(names)}")
    order = np.random.default_rng(seed).permutation(len(names))
    n_train = int(np.floor(train_fraction * len(names)))
    train = sorted(names[i] for i in order[:n_train])
    test = sorted(names[i] for i in order[n_train:])
    return train, test
