"""Minimal reverse-mode autodiff on float32 numpy buffers.

Small by design: exactly the ops the three policy sub-models need (dense,
stride-2 conv via im2col, GELU, softmax/attention, the usual losses) plus
Adam and a single-file checkpoint format.  Everything is deterministic given
the seeds handed to the init functions.
"""

from __future__ import annotations

import json
import math
import os
import struct

import numpy as np

_GELU_A = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

_grad_enabled = True
_nan_debug = bool(os.environ.get("NECKSIM_NAN_DEBUG"))


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


def set_nan_debug(on: bool) -> None:
    """Poison-check every op output for NaN/inf when enabled."""
    global _nan_debug
    _nan_debug = bool(on)


class inference_mode:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _f32(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeMismatch("backward() expects a scalar loss")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _make(self.data + other.data, (self, other))
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _make(self.data * other.data, (self, other))
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        if self.data.shape[-1] != other.data.shape[-2 if other.data.ndim > 1 else 0]:
            raise ShapeMismatch(
                f"matmul {self.data.shape} @ {other.data.shape}")
        out = _make(self.data @ other.data, (self, other))
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    gb = g @ np.swapaxes(other.data, -1, -2) if other.data.ndim > 1 \
                        else np.multiply.outer(g, other.data)
                    self._accumulate(_unbroadcast(gb, self.data.shape))
                if other.requires_grad:
                    ga = np.swapaxes(self.data, -1, -2) @ g if self.data.ndim > 1 \
                        else np.multiply.outer(self.data, g)
                    other._accumulate(_unbroadcast(ga, other.data.shape))
            out._backward = bwd
        return out

    def __getitem__(self, idx):
        out = _make(self.data[idx], (self,))
        if out._parents:
            def bwd(g):
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accumulate(full)
            out._backward = bwd
        return out

    # -- shaping --

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes):
        out = _make(self.data.transpose(axes), (self,))
        if out._parents:
            inv = np.argsort(axes)
            out._backward = lambda g: self._accumulate(g.transpose(inv))
        return out

    # -- reductions / elementwise --

    def sum(self):
        out = _make(self.data.sum(dtype=np.float32), (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(np.full_like(self.data, g))
        return out

    def mean(self):
        n = self.data.size
        out = _make(self.data.mean(dtype=np.float32), (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(np.full_like(self.data, g / n))
        return out

    def exp(self):
        y = np.exp(self.data)
        out = _make(y, (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(g * y)
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = _make(y, (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(g * (1.0 - y * y))
        return out

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))
        out = _make(y, (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(g * y * (1.0 - y))
        return out

    def relu(self):
        y = np.maximum(self.data, 0.0)
        out = _make(y, (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(g * (self.data > 0))
        return out

    def abs(self):
        out = _make(np.abs(self.data), (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(g * np.sign(self.data))
        return out

    def gelu(self):
        x = self.data
        inner = _GELU_A * (x + _GELU_C * x ** 3)
        t = np.tanh(inner)
        y = 0.5 * x * (1.0 + t)
        out = _make(y, (self,))
        if out._parents:
            def bwd(g):
                dinner = _GELU_A * (1.0 + 3.0 * _GELU_C * x ** 2)
                dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
                self._accumulate(g * dy.astype(np.float32))
            out._backward = bwd
        return out

    def softmax(self):
        """Softmax along the last axis."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        out = _make(y, (self,))
        if out._parents:
            def bwd(g):
                dot = (g * y).sum(axis=-1, keepdims=True)
                self._accumulate(y * (g - dot))
            out._backward = bwd
        return out


def _make(data: np.ndarray, parents) -> Tensor:
    data = _f32(data)
    if _nan_debug and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by an op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = _make(np.concatenate(datas, axis=axis), tuple(tensors))
    if out._parents:
        sizes = [d.shape[axis] for d in datas]
        def bwd(g):
            pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
            for t, piece in zip(tensors, pieces):
                if t.requires_grad:
                    t._accumulate(piece)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# convolution (stride-2 3x3 via strided im2col, NHWC)

def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, k * k, c), dtype=xp.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di * k + dj, :] = xp[:, di:di + ho * s:s, dj:dj + wo * s:s, :]
    return cols


def _col2im(gcols: np.ndarray, xp_shape, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for di in range(k):
        for dj in range(k):
            gxp[:, di:di + ho * s:s, dj:dj + wo * s:s, :] += gcols[:, :, :, di * k + dj, :]
    return gxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """NHWC convolution; weight is (k*k*cin, cout), bias (cout,)."""
    n, h, w, cin = x.data.shape
    kkcin, cout = weight.data.shape
    k = int(round(math.sqrt(kkcin // cin)))
    if k * k * cin != kkcin:
        raise ShapeMismatch(f"weight {weight.data.shape} incompatible with cin={cin}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, k, stride, ho, wo)
    flat = cols.reshape(n * ho * wo, k * k * cin)
    y = (flat @ weight.data + bias.data).reshape(n, ho, wo, cout)
    out = _make(y, (x, weight, bias))
    if out._parents:
        def bwd(g):
            gf = g.reshape(n * ho * wo, cout)
            if bias.requires_grad:
                bias._accumulate(gf.sum(axis=0))
            if weight.requires_grad:
                weight._accumulate(flat.T @ gf)
            if x.requires_grad:
                gcols = (gf @ weight.data.T).reshape(n, ho, wo, k * k, cin)
                gxp = _col2im(gcols, xp.shape, k, stride, ho, wo)
                x._accumulate(gxp[:, pad:pad + h, pad:pad + w, :])
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# losses

def loss_ce(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy; integer class targets."""
    data = logits.data
    if data.ndim == 1:
        data = data[None, :]
    tgt = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    b, k = data.shape
    if tgt.shape != (b,):
        raise ShapeMismatch(f"targets {tgt.shape} vs logits {data.shape}")
    if np.any(tgt < 0) or np.any(tgt >= k):
        raise IndexOutOfRange(f"class index outside [0, {k})")
    z = data - data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(b), tgt]
    out = _make(nll.mean(), (logits,))
    if out._parents:
        def bwd(g):
            p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            p[np.arange(b), tgt] -= 1.0
            logits._accumulate((g * p / b).reshape(logits.data.shape))
        out._backward = bwd
    return out


def loss_l1(pred: Tensor, target) -> Tensor:
    t = _f32(target.data if isinstance(target, Tensor) else target)
    if t.shape != pred.data.shape:
        raise ShapeMismatch(f"l1 shapes {pred.data.shape} vs {t.shape}")
    d = pred.data - t
    out = _make(np.abs(d).mean(), (pred,))
    if out._parents:
        out._backward = lambda g: pred._accumulate(g * np.sign(d) / d.size)
    return out


def loss_l2(pred: Tensor, target) -> Tensor:
    t = _f32(target.data if isinstance(target, Tensor) else target)
    if t.shape != pred.data.shape:
        raise ShapeMismatch(f"l2 shapes {pred.data.shape} vs {t.shape}")
    d = pred.data - t
    out = _make((d * d).mean(), (pred,))
    if out._parents:
        out._backward = lambda g: pred._accumulate(g * 2.0 * d / d.size)
    return out


def loss_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(q || N(0, I)) = 1/2 sum(mu^2 + exp(lv) - 1 - lv) over the latent
    axis, averaged over any leading batch axes."""
    if mu.data.shape != logvar.data.shape:
        raise ShapeMismatch("mu/logvar shape mismatch")
    b = int(np.prod(mu.data.shape[:-1])) if mu.data.ndim > 1 else 1
    ev = np.exp(logvar.data)
    val = 0.5 * (mu.data ** 2 + ev - 1.0 - logvar.data).sum() / b
    out = _make(val, (mu, logvar))
    if out._parents:
        def bwd(g):
            if mu.requires_grad:
                mu._accumulate(g * mu.data / b)
            if logvar.requires_grad:
                logvar._accumulate(g * 0.5 * (ev - 1.0) / b)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# optimizer

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update (in-place on param/m/v); t >= 1."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, m, v, self.t,
                      self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# layers

class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        scale = math.sqrt(2.0 / n_in)
        self.w = Tensor(rng.normal(0.0, scale, size=(n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def params(self):
        return [self.w, self.b]


class Conv2d:
    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 k: int = 3, stride: int = 2, pad: int = 1):
        scale = math.sqrt(2.0 / (k * k * cin))
        self.w = Tensor(rng.normal(0.0, scale, size=(k * k * cin, cout)), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride, self.pad)

    def params(self):
        return [self.w, self.b]


class Mlp:
    """GELU MLP; `dims` includes input and output sizes."""

    def __init__(self, dims, rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.gelu()
        return x

    def params(self):
        return [p for l in self.layers for p in l.params()]


class ConvEncoder:
    """Three stride-2 convs, GELU, then flatten-linear to `feat_dim`.

    Input is NHWC float32 in [0,1]-ish range; the flatten layer is sized for
    the (h, w) the encoder was built with.
    """

    def __init__(self, h: int, w: int, cin: int, rng: np.random.Generator,
                 channels=(8, 16, 32), feat_dim: int = 128):
        self.h, self.w, self.cin = h, w, cin
        self.channels = tuple(channels)
        self.feat_dim = feat_dim
        cs = [cin, *channels]
        self.convs = [Conv2d(a, b, rng) for a, b in zip(cs[:-1], cs[1:])]
        ho, wo = h, w
        for _ in channels:
            ho = (ho + 1) // 2
            wo = (wo + 1) // 2
        self.flat_dim = ho * wo * channels[-1]
        self.head = Linear(self.flat_dim, feat_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        n = x.data.shape[0]
        if x.data.shape[1:] != (self.h, self.w, self.cin):
            raise ShapeMismatch(
                f"encoder built for {(self.h, self.w, self.cin)}, got {x.data.shape[1:]}")
        for conv in self.convs:
            x = conv(x).gelu()
        return self.head(x.reshape(n, self.flat_dim))

    def params(self):
        return [p for c in self.convs for p in c.params()] + self.head.params()


class ChunkDecoder:
    """Emits a (K, D) chunk per batch row from a flat conditioning vector.

    kind="mlp" (default): plain GELU MLP.
    kind="attn": 2-layer self-attention readout at width 64 — K learned
    queries cross-attend to tokens projected from the conditioning vector.
    """

    def __init__(self, cond_dim: int, k_steps: int, out_dim: int,
                 rng: np.random.Generator, kind: str = "mlp",
                 hidden: int = 256, attn_dim: int = 64, n_tokens: int = 4):
        self.kind = kind
        self.k_steps, self.out_dim = k_steps, out_dim
        if kind == "mlp":
            self.net = Mlp([cond_dim, hidden, hidden, k_steps * out_dim], rng)
        elif kind == "attn":
            self.n_tokens, self.attn_dim = n_tokens, attn_dim
            self.tok = Linear(cond_dim, n_tokens * attn_dim, rng)
            self.queries = Tensor(rng.normal(0, 0.5, size=(k_steps, attn_dim)),
                                  requires_grad=True)
            self.blocks = []
            for _ in range(2):
                self.blocks.append({
                    "q": Linear(attn_dim, attn_dim, rng),
                    "k": Linear(attn_dim, attn_dim, rng),
                    "v": Linear(attn_dim, attn_dim, rng),
                    "ff": Mlp([attn_dim, 2 * attn_dim, attn_dim], rng),
                })
            self.out = Linear(attn_dim, out_dim, rng)
        else:
            raise ValueError(f"unknown decoder kind {kind!r}")

    def __call__(self, cond: Tensor) -> Tensor:
        n = cond.data.shape[0]
        if self.kind == "mlp":
            return self.net(cond).reshape(n, self.k_steps, self.out_dim)
        toks = self.tok(cond).reshape(n, self.n_tokens, self.attn_dim)
        ones = Tensor(np.ones((n, 1, 1), dtype=np.float32))
        x = ones * self.queries.reshape(1, self.k_steps, self.attn_dim)
        scale = 1.0 / math.sqrt(self.attn_dim)
        for blk in self.blocks:
            q = blk["q"](x)
            kk = blk["k"](toks)
            v = blk["v"](toks)
            att = (q @ kk.transpose(0, 2, 1)) * scale
            x = x + att.softmax() @ v
            x = x + blk["ff"](x)
        return self.out(x)

    def params(self):
        if self.kind == "mlp":
            return self.net.params()
        ps = self.tok.params() + [self.queries]
        for blk in self.blocks:
            ps += blk["q"].params() + blk["k"].params() + blk["v"].params() + blk["ff"].params()
        return ps + self.out.params()


class CvaeHeads:
    """Style encoder of the action-chunk model: maps (state, flattened chunk)
    to a diagonal Gaussian over the latent; z is reparameterized in training
    and fixed to 0 (the prior mean) at inference."""

    def __init__(self, state_dim: int, chunk_elems: int, rng: np.random.Generator,
                 latent_dim: int = 32, hidden: int = 256):
        self.latent_dim = latent_dim
        self.net = Mlp([state_dim + chunk_elems, hidden, 2 * latent_dim], rng)

    def __call__(self, state: Tensor, chunk_flat: Tensor):
        out = self.net(concat([state, chunk_flat], axis=-1))
        mu = out[:, : self.latent_dim]
        logvar = out[:, self.latent_dim:]
        return mu, logvar

    def sample(self, mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
        eps = Tensor(rng.standard_normal(mu.data.shape))
        return mu + (logvar * 0.5).exp() * eps

    def params(self):
        return self.net.params()


# ---------------------------------------------------------------------------
# checkpoint format: u32 header length, JSON header, raw float32 buffers in
# declaration order.  Header carries {"format": 1, "arch": {...}, "shapes":
# [...]} so load can validate.

_MAGIC = b"NSNN"


def save_checkpoint(path: str, header: dict, params) -> None:
    shapes = [list(p.data.shape) for p in params]
    hdr = dict(header)
    hdr["format"] = 1
    hdr["shapes"] = shapes
    blob = json.dumps(hdr, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())


def load_checkpoint(path: str):
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n).decode("utf-8"))
        buffers = []
        for shape in header["shapes"]:
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"{path}: truncated parameter buffer")
            buffers.append(np.frombuffer(raw, dtype=np.float32).reshape(shape).copy())
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after parameters")
    return header, buffers


def assign_params(params, buffers) -> None:
    if len(params) != len(buffers):
        raise ShapeMismatch(f"checkpoint has {len(buffers)} buffers, model has {len(params)}")
    for p, b in zip(params, buffers):
        if tuple(p.data.shape) != tuple(b.shape):
            raise ShapeMismatch(f"buffer {b.shape} vs param {p.data.shape}")
        p.data = b.astype(np.float32)
