"""Training loops for the three sub-models, reading the episode dataset
format directly (frames stay memory-mapped; batches gather on demand).

All loops are deterministic given TrainConfig.seed: parameter init, batch
order, and the CVAE reparameterization noise all derive from it.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import data
from . import models as mdl
from . import nn
from . import policy


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    stride: int = 2  # train on every stride-th step of each episode
    idle_keep: int = 10  # post-completion steps kept per episode
    seed: int = 0
    split_seed: int = 0
    train_fraction: float = 0.9
    log: bool = False


class DemoArrays:
    """Per-episode numpy views over a demonstration dataset."""

    def __init__(self, dataset_dir: str, names):
        self.dataset_dir = dataset_dir
        self.names = list(names)
        self.manifest = data.read_manifest(dataset_dir)
        self.neck = []
        self.arm = []
        self.gaze = []
        self.gaze_valid = []
        self.frames = []
        self.steps = []
        for name in self.names:
            ep = os.path.join(dataset_dir, name)
            meta, records, frames = data.read_episode(ep, mmap_frames=True)
            self.frames.append(frames)
            self.steps.append(meta.steps)
            self.neck.append(np.array([r.neck for r in records], dtype=np.float32))
            self.arm.append(np.array([r.arm for r in records], dtype=np.float32))
            self.gaze.append(np.array([r.gaze for r in records], dtype=np.float32))
            self.gaze_valid.append(np.array([r.gaze_valid for r in records], dtype=bool))
        self.width = self.manifest["width"]
        self.height = self.manifest["height"]

    def active_span(self, e: int, idle_keep: int) -> int:
        """Steps worth training on: through the last arm/neck/gripper motion
        plus a short hold margin.  Without the cut, the parked post-release
        tail dominates every loss and mode-collapses the policies."""
        arm = self.arm[e]
        neck = self.neck[e]
        moving = (np.linalg.norm(np.diff(arm, axis=0), axis=1) > 1e-5) \
            | (np.linalg.norm(np.diff(neck, axis=0), axis=1) > 1e-6)
        idx = np.nonzero(moving)[0]
        last = int(idx[-1]) + 1 if len(idx) else len(arm) - 1
        return min(len(arm), last + 1 + idle_keep)

    def neck_chunk(self, e: int, t: int, horizon: int) -> np.ndarray:
        """Realized neck deltas for steps t..t+horizon-1, zero-padded."""
        neck = self.neck[e]
        deltas = np.zeros((horizon, 2), dtype=np.float32)
        avail = min(horizon, len(neck) - 1 - t)
        if avail > 0:
            deltas[:avail] = neck[t + 1:t + 1 + avail] - neck[t:t + avail]
        return deltas

    def arm_chunk(self, e: int, t: int, horizon: int) -> np.ndarray:
        """Future arm states t+1..t+horizon, padded by repeating the last."""
        arm = self.arm[e]
        idx = np.minimum(np.arange(t + 1, t + 1 + horizon), len(arm) - 1)
        return arm[idx]

    def sample_steps(self, stride: int, idle_keep: int = 10):
        """(episode, step) index over the active spans at the given stride."""
        out = []
        for e in range(len(self.steps)):
            span = self.active_span(e, idle_keep)
            out.extend((e, t) for t in range(0, span, stride))
        return np.array(out, dtype=np.int64)


def train_split_arrays(dataset_dir: str, tcfg: TrainConfig) -> DemoArrays:
    train, _ = data.split(dataset_dir, tcfg.train_fraction, tcfg.split_seed)
    return DemoArrays(dataset_dir, train)


def _epoch_batches(index: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(index))
    for lo in range(0, len(order) - batch_size + 1, batch_size):
        yield index[order[lo:lo + batch_size]]


def _log(tcfg, msg):
    if tcfg.log:
        print(msg, flush=True)


def train_neck(dataset_dir: str, pcfg: mdl.PolicyConfig, tcfg: TrainConfig) -> mdl.NeckModel:
    demos = train_split_arrays(dataset_dir, tcfg)
    if not demos.manifest["with_neck"]:
        raise ValueError("neck model trains on a with-neck dataset")
    rng = np.random.default_rng(np.random.SeedSequence((tcfg.seed, 0xA1)))
    model = mdl.NeckModel(pcfg, rng)
    opt = nn.Adam(model.params(), lr=tcfg.lr)
    index = demos.sample_steps(tcfg.stride, tcfg.idle_keep)
    for epoch in range(tcfg.epochs):
        t0 = time.time()
        total = n = 0
        for batch in _epoch_batches(index, tcfg.batch_size, rng):
            left = np.stack([demos.frames[e][t, 0] for e, t in batch])
            right = np.stack([demos.frames[e][t, 1] for e, t in batch])
            target = np.stack([demos.neck_chunk(e, t, mdl.NECK_HORIZON) for e, t in batch])
            target = target * model.neck_scale
            opt.zero_grad()
            pred = model.forward_batch(mdl.normalize_images(left),
                                       mdl.normalize_images(right))
            loss = nn.loss_l1(pred, target)
            loss.backward()
            opt.step()
            total += float(loss.data)
            n += 1
        _log(tcfg, f"[neck] epoch {epoch + 1}/{tcfg.epochs} "
                   f"loss {total / max(n, 1):.4f} ({time.time() - t0:.1f}s)")
    return model


def _gaze_sample_index(demos: DemoArrays, stride: int, idle_keep: int = 10) -> np.ndarray:
    """(episode, step, eye) triples with valid recorded gaze, active span only."""
    out = []
    for e in range(len(demos.steps)):
        valid = demos.gaze_valid[e]
        span = demos.active_span(e, idle_keep)
        for t in range(0, span, stride):
            if valid[t]:
                out.append((e, t, 0))
                out.append((e, t, 1))
    return np.array(out, dtype=np.int64)


def _gaze_pixel(demos: DemoArrays, e: int, t: int, eye: int) -> np.ndarray:
    g = demos.gaze[e][t]
    return g[0:2] if eye == 0 else g[2:4]


def train_gaze_coarse(dataset_dir: str, pcfg: mdl.PolicyConfig,
                      tcfg: TrainConfig) -> mdl.GazeCoarseModel:
    demos = train_split_arrays(dataset_dir, tcfg)
    rng = np.random.default_rng(np.random.SeedSequence((tcfg.seed, 0xA2)))
    model = mdl.GazeCoarseModel(pcfg, rng)
    opt = nn.Adam(model.params(), lr=tcfg.lr)
    index = _gaze_sample_index(demos, tcfg.stride, tcfg.idle_keep)
    w, h, g = demos.width, demos.height, pcfg.grid
    for epoch in range(tcfg.epochs):
        t0 = time.time()
        total = n = 0
        for batch in _epoch_batches(index, tcfg.batch_size, rng):
            imgs = np.stack([demos.frames[e][t, eye] for e, t, eye in batch])
            classes = []
            for e, t, eye in batch:
                gx, gy = _gaze_pixel(demos, e, t, eye)
                classes.append(policy.patch_index_of(gy, h, g) * g
                               + policy.patch_index_of(gx, w, g))
            opt.zero_grad()
            loss = nn.loss_ce(model.forward_batch(mdl.normalize_images(imgs)),
                              np.array(classes))
            loss.backward()
            opt.step()
            total += float(loss.data)
            n += 1
        _log(tcfg, f"[gaze-coarse] epoch {epoch + 1}/{tcfg.epochs} "
                   f"loss {total / max(n, 1):.4f} ({time.time() - t0:.1f}s)")
    return model


def train_gaze_fine(dataset_dir: str, pcfg: mdl.PolicyConfig,
                    tcfg: TrainConfig) -> mdl.GazeFineModel:
    demos = train_split_arrays(dataset_dir, tcfg)
    rng = np.random.default_rng(np.random.SeedSequence((tcfg.seed, 0xA3)))
    model = mdl.GazeFineModel(pcfg, rng)
    opt = nn.Adam(model.params(), lr=tcfg.lr)
    index = _gaze_sample_index(demos, tcfg.stride, tcfg.idle_keep)
    w, h, g = demos.width, demos.height, pcfg.grid
    for epoch in range(tcfg.epochs):
        t0 = time.time()
        total = n = 0
        for batch in _epoch_batches(index, tcfg.batch_size, rng):
            crops = []
            targets = []
            for e, t, eye in batch:
                gx, gy = _gaze_pixel(demos, e, t, eye)
                i = policy.patch_index_of(gx, w, g)
                j = policy.patch_index_of(gy, h, g)
                crop, (ox, oy) = policy.crop_patch_region(
                    demos.frames[e][t, eye], i, j, pcfg.crop, g)
                crops.append(crop)
                targets.append([np.clip(gx - ox, 0, pcfg.crop),
                                np.clip(gy - oy, 0, pcfg.crop)])
            opt.zero_grad()
            pred = model.forward_batch(mdl.normalize_images(np.stack(crops)))
            loss = nn.loss_l2(pred, np.array(targets, dtype=np.float32))
            loss.backward()
            opt.step()
            total += float(loss.data)
            n += 1
        _log(tcfg, f"[gaze-fine] epoch {epoch + 1}/{tcfg.epochs} "
                   f"loss {total / max(n, 1):.4f} ({time.time() - t0:.1f}s)")
    return model


def _act_state_rows(demos: DemoArrays, mode: str):
    rows = []
    for e in range(len(demos.names)):
        parts = [demos.arm[e], demos.gaze[e]]
        if mode == mdl.WITH_NECK:
            parts.append(demos.neck[e])
        rows.append(np.concatenate(parts, axis=1))
    return rows


def train_act(dataset_dir: str, pcfg: mdl.PolicyConfig, tcfg: TrainConfig,
              mode: str | None = None) -> mdl.ActModel:
    demos = train_split_arrays(dataset_dir, tcfg)
    if mode is None:
        mode = mdl.WITH_NECK if demos.manifest["with_neck"] else mdl.NO_NECK
    rng = np.random.default_rng(np.random.SeedSequence((tcfg.seed, 0xA4)))
    states = _act_state_rows(demos, mode)
    state_norm = mdl.Normalizer.fit(np.concatenate(states, axis=0))
    target_norm = mdl.Normalizer.fit(
        np.concatenate([demos.arm[e] for e in range(len(demos.names))], axis=0))
    model = mdl.ActModel(pcfg, mode, rng, state_norm, target_norm)
    opt = nn.Adam(model.params(), lr=tcfg.lr)
    index = demos.sample_steps(tcfg.stride, tcfg.idle_keep)
    # emphasize the rows that actually get executed (ages 0..exec_window-1):
    # flat weight across the execution window, decaying beyond it
    h_idx = np.arange(mdl.ACT_HORIZON, dtype=np.float32)
    hw = np.where(h_idx < pcfg.exec_window, 1.0,
                  np.exp(-(h_idx - pcfg.exec_window + 1) / 8.0)).astype(np.float32)
    hw /= hw.mean()
    horizon_w = nn.Tensor(hw[None, :, None])
    for epoch in range(tcfg.epochs):
        t0 = time.time()
        tot_l1 = tot_kl = n = 0
        for batch in _epoch_batches(index, tcfg.batch_size, rng):
            crops_l, crops_r, st, arm_now, tgt = [], [], [], [], []
            for e, t in batch:
                gaze = demos.gaze[e][t]
                cl, _ = policy.foveate(demos.frames[e][t, 0], gaze[0:2], pcfg.crop)
                cr, _ = policy.foveate(demos.frames[e][t, 1], gaze[2:4], pcfg.crop)
                crops_l.append(cl)
                crops_r.append(cr)
                st.append(states[e][t])
                arm_now.append(demos.arm[e][t])
                tgt.append(demos.arm_chunk(e, t, mdl.ACT_HORIZON))
            st_n = state_norm.apply(np.stack(st))
            arm_now_n = target_norm.apply(np.stack(arm_now))
            tgt_n = state_norm_apply_target(target_norm, np.stack(tgt))
            opt.zero_grad()
            mu, logvar = model.encode_batch(st_n, tgt_n)
            z = model.cvae.sample(mu, logvar, rng)
            pred = model.decode_batch(mdl.normalize_images(np.stack(crops_l)),
                                      mdl.normalize_images(np.stack(crops_r)),
                                      st_n, z, arm_now_n)
            l1 = ((pred - nn.Tensor(tgt_n)).abs() * horizon_w).mean()
            kl = nn.loss_kl(mu, logvar)
            loss = l1 + pcfg.kl_weight * kl
            loss.backward()
            opt.step()
            tot_l1 += float(l1.data)
            tot_kl += float(kl.data)
            n += 1
        _log(tcfg, f"[act:{mode}] epoch {epoch + 1}/{tcfg.epochs} "
                   f"l1 {tot_l1 / max(n, 1):.4f} kl {tot_kl / max(n, 1):.4f} "
                   f"({time.time() - t0:.1f}s)")
    return model


def state_norm_apply_target(norm: mdl.Normalizer, chunks: np.ndarray) -> np.ndarray:
    """Normalize (B, K, 10) target chunks row-wise."""
    return ((chunks - norm.mean) / norm.std).astype(np.float32)


TRAINERS = {
    "neck": train_neck,
    "gaze-coarse": train_gaze_coarse,
    "gaze-fine": train_gaze_fine,
    "act": train_act,
}


def train_model(name: str, dataset_dir: str, pcfg: mdl.PolicyConfig,
                tcfg: TrainConfig):
    if name not in TRAINERS:
        raise ValueError(f"unknown model {name!r}; pick from {sorted(TRAINERS)}")
    return TRAINERS[name](dataset_dir, pcfg, tcfg)
