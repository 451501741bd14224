"""The three policy sub-models: neck-delta chunks, coarse+fine gaze, and the
CVAE action-chunk model.

Feature extraction uses small trainable ConvEncoders instead of pretrained
backbones; the encoder interface is pluggable so a heavier backbone could be
swapped in.  Each model serializes to a single checkpoint file: JSON header
(kind, architecture, normalization stats) + raw float32 buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn


class ModelMismatch(ValueError):
    pass


GRID = 16  # G x G gaze patch grid

WITH_NECK = "with-neck"
NO_NECK = "no-neck"

ARM_DIM = 10
GAZE_DIM = 4
NECK_DIM = 2
NECK_HORIZON = 10
ACT_HORIZON = 50


def state_dim_for(mode: str) -> int:
    # with-neck: arm(10) + gaze(4) + neck(2); no-neck drops the neck angles
    return ARM_DIM + GAZE_DIM + (NECK_DIM if mode == WITH_NECK else 0)


@dataclass(frozen=True)
class PolicyConfig:
    width: int = 256
    height: int = 144
    crop: int = 32  # desk-scale foveated crop (224 at paper scale)
    grid: int = GRID
    feat_dim: int = 128
    enc_channels: tuple = (8, 16, 32)
    latent_dim: int = 32
    hidden: int = 256
    decoder_kind: str = "mlp"  # or "attn"
    ensemble_decay: float = 0.1
    exec_window: int = 10
    kl_weight: float = 10.0
    gaze_left_eye_only: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        d["enc_channels"] = tuple(d["enc_channels"])
        return cls(**d)


def normalize_images(raw: np.ndarray) -> np.ndarray:
    """uint8 (..., H, W, 3) -> float32 in [-0.5, 0.5]."""
    return raw.astype(np.float32) / 255.0 - 0.5


def downsample2x(imgs: np.ndarray) -> np.ndarray:
    """2x2 mean pool over (..., H, W, 3); H and W must be even.

    The full-image models (neck, coarse gaze) only need patch-level spatial
    resolution — sub-patch precision comes from the fine model's full-res
    crops — so they run on a half-resolution view for speed."""
    h, w = imgs.shape[-3], imgs.shape[-2]
    x = imgs.reshape(*imgs.shape[:-3], h // 2, 2, w // 2, 2, 3)
    return x.mean(axis=(-2, -4))


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Normalizer":
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std[std < 1e-6] = 1.0
        return cls(mean.astype(np.float32), std.astype(np.float32))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim, dtype=np.float32), np.ones(dim, dtype=np.float32))

    def apply(self, rows: np.ndarray) -> np.ndarray:
        return ((rows - self.mean) / self.std).astype(np.float32)

    def invert(self, rows: np.ndarray) -> np.ndarray:
        return rows * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], np.float32), np.asarray(d["std"], np.float32))


class NeckModel:
    """Full stereo images -> 10x2 chunk of future (dyaw, dpitch).

    Deltas are scaled by 1/neck_rate internally so the regression target is
    O(1); `neck_scale` is stored in the checkpoint.
    """

    kind = "neck"

    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator,
                 neck_scale: float = 20.0):
        self.cfg = cfg
        self.neck_scale = neck_scale
        self.encoder = nn.ConvEncoder(cfg.height // 2, cfg.width // 2, 3, rng,
                                      channels=cfg.enc_channels, feat_dim=cfg.feat_dim)
        self.head = nn.Mlp([2 * cfg.feat_dim, cfg.hidden, NECK_HORIZON * NECK_DIM], rng)

    def params(self):
        return self.encoder.params() + self.head.params()

    def forward_batch(self, left: np.ndarray, right: np.ndarray) -> nn.Tensor:
        """Scaled-delta chunks from normalized full-res images, Tensor (B, 10, 2)."""
        fl = self.encoder(nn.Tensor(downsample2x(left)))
        fr = self.encoder(nn.Tensor(downsample2x(right)))
        out = self.head(nn.concat([fl, fr], axis=-1))
        return out.reshape(left.shape[0], NECK_HORIZON, NECK_DIM)

    def predict_chunk(self, left_raw: np.ndarray, right_raw: np.ndarray) -> np.ndarray:
        """Inference: uint8 eye images -> (10, 2) neck deltas in radians."""
        with nn.inference_mode():
            out = self.forward_batch(normalize_images(left_raw[None]),
                                     normalize_images(right_raw[None]))
        return out.data[0] / self.neck_scale

    def header(self) -> dict:
        return {"kind": self.kind, "policy": self.cfg.to_dict(),
                "neck_scale": self.neck_scale}

    def save(self, path: str):
        nn.save_checkpoint(path, self.header(), self.params())

    @classmethod
    def load(cls, path: str) -> "NeckModel":
        header, buffers = nn.load_checkpoint(path)
        if header.get("kind") != cls.kind:
            raise ModelMismatch(f"{path}: kind {header.get('kind')!r}, expected {cls.kind!r}")
        model = cls(PolicyConfig.from_dict(header["policy"]),
                    np.random.default_rng(0), header["neck_scale"])
        nn.assign_params(model.params(), buffers)
        return model


class GazeCoarseModel:
    """One eye image -> logits over the GxG patch grid (shared across eyes)."""

    kind = "gaze_coarse"

    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = nn.ConvEncoder(cfg.height // 2, cfg.width // 2, 3, rng,
                                      channels=cfg.enc_channels, feat_dim=cfg.feat_dim)
        self.head = nn.Mlp([cfg.feat_dim, cfg.hidden, cfg.grid * cfg.grid], rng)

    def params(self):
        return self.encoder.params() + self.head.params()

    def forward_batch(self, imgs: np.ndarray) -> nn.Tensor:
        return self.head(self.encoder(nn.Tensor(downsample2x(imgs))))

    def logits(self, img_raw: np.ndarray) -> np.ndarray:
        with nn.inference_mode():
            return self.forward_batch(normalize_images(img_raw[None])).data[0]

    def header(self) -> dict:
        return {"kind": self.kind, "policy": self.cfg.to_dict()}

    def save(self, path: str):
        nn.save_checkpoint(path, self.header(), self.params())

    @classmethod
    def load(cls, path: str) -> "GazeCoarseModel":
        header, buffers = nn.load_checkpoint(path)
        if header.get("kind") != cls.kind:
            raise ModelMismatch(f"{path}: kind {header.get('kind')!r}, expected {cls.kind!r}")
        model = cls(PolicyConfig.from_dict(header["policy"]), np.random.default_rng(0))
        nn.assign_params(model.params(), buffers)
        return model


class GazeFineModel:
    """Foveal crop -> sub-crop gaze coordinates in [0, C] (sigmoid-bounded)."""

    kind = "gaze_fine"

    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = nn.ConvEncoder(cfg.crop, cfg.crop, 3, rng,
                                      channels=cfg.enc_channels, feat_dim=cfg.feat_dim)
        self.head = nn.Mlp([cfg.feat_dim, 64, 2], rng)

    def params(self):
        return self.encoder.params() + self.head.params()

    def forward_batch(self, crops: np.ndarray) -> nn.Tensor:
        out = self.head(self.encoder(nn.Tensor(crops)))
        return out.sigmoid() * float(self.cfg.crop)

    def predict(self, crop_raw: np.ndarray) -> np.ndarray:
        with nn.inference_mode():
            return self.forward_batch(normalize_images(crop_raw[None])).data[0]

    def header(self) -> dict:
        return {"kind": self.kind, "policy": self.cfg.to_dict()}

    def save(self, path: str):
        nn.save_checkpoint(path, self.header(), self.params())

    @classmethod
    def load(cls, path: str) -> "GazeFineModel":
        header, buffers = nn.load_checkpoint(path)
        if header.get("kind") != cls.kind:
            raise ModelMismatch(f"{path}: kind {header.get('kind')!r}, expected {cls.kind!r}")
        model = cls(PolicyConfig.from_dict(header["policy"]), np.random.default_rng(0))
        nn.assign_params(model.params(), buffers)
        return model


class ActModel:
    """CVAE action-chunk model: foveated stereo crops + robot state (+ latent
    z) -> 50x10 chunk of future arm states.

    Targets and the state vector are z-scored with dataset statistics stored
    in the checkpoint; z = 0 at inference.
    """

    kind = "act"

    def __init__(self, cfg: PolicyConfig, mode: str, rng: np.random.Generator,
                 state_norm: Normalizer | None = None,
                 target_norm: Normalizer | None = None):
        if mode not in (WITH_NECK, NO_NECK):
            raise ValueError(f"unknown mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.state_dim = state_dim_for(mode)
        self.state_norm = state_norm or Normalizer.identity(self.state_dim)
        self.target_norm = target_norm or Normalizer.identity(ARM_DIM)
        self.encoder = nn.ConvEncoder(cfg.crop, cfg.crop, 3, rng,
                                      channels=cfg.enc_channels, feat_dim=cfg.feat_dim)
        cond_dim = 2 * cfg.feat_dim + self.state_dim + cfg.latent_dim
        self.decoder = nn.ChunkDecoder(cond_dim, ACT_HORIZON, ARM_DIM, rng,
                                       kind=cfg.decoder_kind, hidden=cfg.hidden)
        self.cvae = nn.CvaeHeads(self.state_dim, ACT_HORIZON * ARM_DIM, rng,
                                 latent_dim=cfg.latent_dim, hidden=cfg.hidden)

    def params(self):
        return self.encoder.params() + self.decoder.params() + self.cvae.params()

    def encode_batch(self, state_n: np.ndarray, chunk_n: np.ndarray):
        """CVAE posterior from normalized state and normalized target chunk."""
        b = state_n.shape[0]
        return self.cvae(nn.Tensor(state_n),
                         nn.Tensor(chunk_n.reshape(b, ACT_HORIZON * ARM_DIM)))

    def decode_batch(self, crop_l: np.ndarray, crop_r: np.ndarray,
                     state_n: np.ndarray, z: nn.Tensor,
                     arm_now_n: np.ndarray) -> nn.Tensor:
        """Normalized-space chunk prediction, Tensor (B, 50, 10).

        The decoder emits residuals around the current (normalized) arm
        state; absolute far-future rows would otherwise dominate the loss
        and starve the executed near-horizon rows of precision."""
        fl = self.encoder(nn.Tensor(crop_l))
        fr = self.encoder(nn.Tensor(crop_r))
        cond = nn.concat([fl, fr, nn.Tensor(state_n), z], axis=-1)
        base = nn.Tensor(arm_now_n[:, None, :].astype(np.float32))
        return self.decoder(cond) + base

    def predict_chunk(self, crop_l_raw: np.ndarray, crop_r_raw: np.ndarray,
                      state: np.ndarray) -> np.ndarray:
        """Inference with z = 0: raw uint8 crops + unnormalized state ->
        (50, 10) arm-state chunk in world units."""
        if state.shape != (self.state_dim,):
            raise ModelMismatch(f"state dim {state.shape} vs model {self.state_dim}")
        state_n = self.state_norm.apply(state[None])
        arm_now_n = self.target_norm.apply(state[None, :ARM_DIM])
        z = nn.Tensor(np.zeros((1, self.cfg.latent_dim), dtype=np.float32))
        with nn.inference_mode():
            out = self.decode_batch(normalize_images(crop_l_raw[None]),
                                    normalize_images(crop_r_raw[None]), state_n, z,
                                    arm_now_n)
        return self.target_norm.invert(out.data[0])

    def header(self) -> dict:
        return {"kind": self.kind, "mode": self.mode, "policy": self.cfg.to_dict(),
                "state_norm": self.state_norm.to_dict(),
                "target_norm": self.target_norm.to_dict()}

    def save(self, path: str):
        nn.save_checkpoint(path, self.header(), self.params())

    @classmethod
    def load(cls, path: str) -> "ActModel":
        header, buffers = nn.load_checkpoint(path)
        if header.get("kind") != cls.kind:
            raise ModelMismatch(f"{path}: kind {header.get('kind')!r}, expected {cls.kind!r}")
        model = cls(PolicyConfig.from_dict(header["policy"]), header["mode"],
                    np.random.default_rng(0),
                    Normalizer.from_dict(header["state_norm"]),
                    Normalizer.from_dict(header["target_norm"]))
        nn.assign_params(model.params(), buffers)
        return model


@dataclass
class PolicySet:
    """Checkpoint bundle driving one closed-loop episode."""

    gaze_coarse: GazeCoarseModel
    gaze_fine: GazeFineModel
    act: ActModel
    neck: NeckModel | None = None

    @property
    def mode(self) -> str:
        return self.act.mode

    def validate(self, mode: str):
        if mode not in (WITH_NECK, NO_NECK):
            raise ValueError(f"unknown mode {mode!r}")
        if self.act.mode != mode:
            raise ModelMismatch(
                f"action checkpoint is {self.act.mode!r}, requested {mode!r}")
        if mode == WITH_NECK and self.neck is None:
            raise ModelMismatch("with-neck run requires a neck checkpoint")
        if mode == NO_NECK and self.neck is not None:
            raise ModelMismatch("no-neck run must not load a neck checkpoint")
