import math

import numpy as np
import pytest

from necksim import nn
from _gradcheck import check_gradients


def t(x, rg=True):
    return nn.Tensor(x, requires_grad=rg)


def test_sum_gradient_is_ones():
    x = t(np.arange(12, dtype=np.float32).reshape(3, 4))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))


def test_linear_l2_matches_hand_derivation():
    # loss = sum((W x - y)^2); dL/dW = 2 (W x - y) x^T
    rng = np.random.default_rng(0)
    W = t(rng.normal(size=(4, 3)))
    x = rng.normal(size=3).astype(np.float32)
    y = rng.normal(size=4).astype(np.float32)
    pred = W @ nn.Tensor(x)
    diff = pred - nn.Tensor(y)
    (diff * diff).sum().backward()
    resid = W.data @ x - y
    expected = 2.0 * np.outer(resid, x)
    np.testing.assert_allclose(W.grad, expected, rtol=1e-5, atol=1e-6)


def test_backward_requires_scalar():
    x = t(np.ones((2, 2)))
    with pytest.raises(nn.ShapeMismatch):
        (x * 2).backward()


def test_matmul_shape_mismatch():
    with pytest.raises(nn.ShapeMismatch):
        t(np.ones((2, 3))) @ t(np.ones((2, 3)))


@pytest.mark.parametrize("op", ["add", "mul", "matmul", "bmm", "gelu", "tanh",
                                "sigmoid", "relu", "softmax", "exp", "mean",
                                "reshape", "transpose", "getitem", "concat"])
def test_op_gradcheck(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    a = t(rng.normal(size=(3, 4)))
    b = t(rng.normal(size=(3, 4)))
    c = t(rng.normal(size=(4, 5)))
    batched = t(rng.normal(size=(2, 3, 4)))
    batched2 = t(rng.normal(size=(2, 4, 3)))
    builders = {
        "add": (lambda: ((a + b) * (a + b)).mean(), [a, b]),
        "mul": (lambda: (a * b).mean(), [a, b]),
        "matmul": (lambda: ((a @ c).tanh()).mean(), [a, c]),
        "bmm": (lambda: (batched @ batched2).mean(), [batched, batched2]),
        "gelu": (lambda: a.gelu().mean(), [a]),
        "tanh": (lambda: a.tanh().mean(), [a]),
        "sigmoid": (lambda: a.sigmoid().mean(), [a]),
        "relu": (lambda: (a.relu() * b).mean(), [a, b]),
        "softmax": (lambda: (a.softmax() * b).mean(), [a, b]),
        "exp": (lambda: (a * 0.3).exp().mean(), [a]),
        "mean": (lambda: (a * b).mean(), [a]),
        "reshape": (lambda: (a.reshape(2, 6) @ t(np.ones((6, 2)), rg=False)).mean(), [a]),
        "transpose": (lambda: (a.transpose(1, 0) @ b).mean(), [a, b]),
        "getitem": (lambda: (a[:, 1:3] * b[:, :2]).mean(), [a, b]),
        "concat": (lambda: nn.concat([a, b], axis=-1).gelu().mean(), [a, b]),
    }
    build, params = builders[op]
    check_gradients(build, params)


def test_broadcast_add_bias_gradcheck():
    rng = np.random.default_rng(11)
    x = t(rng.normal(size=(4, 3)))
    bias = t(rng.normal(size=3))
    check_gradients(lambda: ((x + bias).gelu()).mean(), [x, bias])


def test_conv2d_gradcheck():
    rng = np.random.default_rng(5)
    x = t(rng.normal(size=(2, 6, 8, 3)) * 0.5)
    conv = nn.Conv2d(3, 4, rng)
    check_gradients(lambda: conv(x).gelu().mean(), [x, conv.w, conv.b])


def test_conv2d_output_shape():
    rng = np.random.default_rng(6)
    conv = nn.Conv2d(3, 8, rng)
    y = conv(nn.Tensor(np.zeros((1, 9, 15, 3), dtype=np.float32)))
    assert y.shape == (1, 5, 8, 8)


def test_mlp_gradcheck():
    rng = np.random.default_rng(7)
    mlp = nn.Mlp([5, 8, 3], rng)
    x = t(rng.normal(size=(4, 5)))
    check_gradients(lambda: (mlp(x) * mlp(x)).mean(), mlp.params() + [x])


def test_conv_encoder_gradcheck_small():
    rng = np.random.default_rng(8)
    enc = nn.ConvEncoder(8, 10, 3, rng, channels=(2, 3, 4), feat_dim=6)
    x = t(rng.normal(size=(2, 8, 10, 3)) * 0.3)
    check_gradients(lambda: enc(x).tanh().mean(), enc.params())


def test_chunk_decoder_mlp_shape_and_grad():
    rng = np.random.default_rng(9)
    dec = nn.ChunkDecoder(7, 5, 4, rng, kind="mlp", hidden=16)
    x = t(rng.normal(size=(3, 7)))
    assert dec(x).shape == (3, 5, 4)
    check_gradients(lambda: dec(x).mean(), dec.params() + [x])


def test_chunk_decoder_attention_shape_and_grad():
    rng = np.random.default_rng(10)
    dec = nn.ChunkDecoder(7, 5, 4, rng, kind="attn", attn_dim=8, n_tokens=3)
    x = t(rng.normal(size=(2, 7)))
    assert dec(x).shape == (2, 5, 4)
    # deep composition: float32 central differences carry ~1e-3 absolute
    # round-off noise at h=1e-3, so allow that floor (per-op checks above
    # verify each primitive at the tight tolerance)
    check_gradients(lambda: dec(x).mean(), dec.params() + [x], atol=2.5e-3)


def test_cvae_heads_gradcheck():
    rng = np.random.default_rng(12)
    heads = nn.CvaeHeads(4, 10, rng, latent_dim=3, hidden=8)
    s = t(rng.normal(size=(2, 4)))
    ch = t(rng.normal(size=(2, 10)))

    def build():
        mu, lv = heads(s, ch)
        return nn.loss_kl(mu, lv) + (mu * mu).mean()

    check_gradients(build, heads.params())


# -- losses --

def test_ce_uniform_logits():
    logits = nn.Tensor(np.zeros((1, 256), dtype=np.float32), requires_grad=True)
    loss = nn.loss_ce(logits, [3])
    assert float(loss.data) == pytest.approx(math.log(256), abs=1e-5)


def test_ce_confident_correct():
    z = np.zeros((1, 16), dtype=np.float32)
    z[0, 5] = 50.0
    assert float(nn.loss_ce(nn.Tensor(z), [5]).data) == pytest.approx(0.0, abs=1e-5)


def test_ce_matches_direct_softmax_oracle():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(7, 12)).astype(np.float32)
    tgt = rng.integers(0, 12, size=7)
    # independent oracle: explicit softmax + nll in float64
    p = np.exp(z.astype(np.float64))
    p /= p.sum(axis=1, keepdims=True)
    expected = -np.log(p[np.arange(7), tgt]).mean()
    assert float(nn.loss_ce(nn.Tensor(z), tgt).data) == pytest.approx(expected, rel=1e-5)


def test_ce_rejects_bad_index():
    with pytest.raises(nn.IndexOutOfRange):
        nn.loss_ce(nn.Tensor(np.zeros((1, 4), dtype=np.float32)), [4])


def test_ce_gradcheck():
    rng = np.random.default_rng(14)
    z = t(rng.normal(size=(5, 9)))
    check_gradients(lambda: nn.loss_ce(z, [0, 3, 8, 2, 2]), [z])


def test_l1_l2_trivial_and_oracle():
    rng = np.random.default_rng(15)
    a = rng.normal(size=(4, 6)).astype(np.float32)
    assert float(nn.loss_l1(nn.Tensor(a), a).data) == 0.0
    assert float(nn.loss_l2(nn.Tensor(a), a).data) == 0.0
    shifted = a + 0.5
    assert float(nn.loss_l1(nn.Tensor(shifted), a).data) == pytest.approx(0.5, abs=1e-6)
    b = rng.normal(size=(4, 6)).astype(np.float32)
    assert float(nn.loss_l1(nn.Tensor(a), b).data) == pytest.approx(
        np.abs(a.astype(np.float64) - b).mean(), rel=1e-6)
    assert float(nn.loss_l2(nn.Tensor(a), b).data) == pytest.approx(
        ((a.astype(np.float64) - b) ** 2).mean(), rel=1e-6)


def test_l1_l2_shape_mismatch():
    with pytest.raises(nn.ShapeMismatch):
        nn.loss_l1(nn.Tensor(np.zeros((2, 3), dtype=np.float32)), np.zeros((3, 2)))
    with pytest.raises(nn.ShapeMismatch):
        nn.loss_l2(nn.Tensor(np.zeros((2, 3), dtype=np.float32)), np.zeros((3, 2)))


def test_l1_l2_gradcheck():
    rng = np.random.default_rng(16)
    a = t(rng.normal(size=(3, 5)))
    tgt = rng.normal(size=(3, 5)).astype(np.float32) + 2.0  # keep |diff| away from 0
    check_gradients(lambda: nn.loss_l1(a, tgt), [a])
    check_gradients(lambda: nn.loss_l2(a, tgt), [a])


def test_kl_standard_normal_is_zero():
    z = nn.Tensor(np.zeros(4, dtype=np.float32))
    assert float(nn.loss_kl(z, z).data) == 0.0


def test_kl_unit_mean_half():
    mu = nn.Tensor(np.array([1.0], dtype=np.float32))
    lv = nn.Tensor(np.array([0.0], dtype=np.float32))
    assert float(nn.loss_kl(mu, lv).data) == pytest.approx(0.5, abs=1e-6)


def test_kl_matches_formula_oracle_and_nonnegative():
    rng = np.random.default_rng(17)
    mu = rng.normal(size=(6, 8)).astype(np.float32)
    lv = rng.normal(size=(6, 8)).astype(np.float32)
    expected = 0.5 * (mu.astype(np.float64) ** 2 + np.exp(lv.astype(np.float64))
                      - 1.0 - lv).sum() / 6
    got = float(nn.loss_kl(nn.Tensor(mu), nn.Tensor(lv)).data)
    assert got == pytest.approx(expected, rel=1e-5)
    assert got >= 0.0
    for _ in range(50):
        m = rng.normal(size=5).astype(np.float32)
        l = rng.normal(size=5).astype(np.float32)
        assert float(nn.loss_kl(nn.Tensor(m), nn.Tensor(l)).data) >= 0.0


def test_kl_gradcheck():
    rng = np.random.default_rng(18)
    mu = t(rng.normal(size=(2, 4)))
    lv = t(rng.normal(size=(2, 4)))
    check_gradients(lambda: nn.loss_kl(mu, lv), [mu, lv])


# -- optimizer --

def test_adam_zero_gradient_no_move():
    p = np.array([1.0, -2.0], dtype=np.float32)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    nn.adam_step(p, np.zeros_like(p), m, v, t=1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_formula():
    # at t=1 bias correction cancels: step = -lr * g / (|g| + eps')
    g = np.array([0.3, -0.7, 2.0], dtype=np.float32)
    p = np.zeros(3, dtype=np.float32)
    m = np.zeros(3, dtype=np.float32)
    v = np.zeros(3, dtype=np.float32)
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    nn.adam_step(p, g, m, v, t=1, lr=lr, beta1=b1, beta2=b2, eps=eps)
    mhat = (1 - b1) * g / (1 - b1)
    vhat = (1 - b2) * g * g / (1 - b2)
    expected = -lr * mhat / (np.sqrt(vhat) + eps)
    np.testing.assert_allclose(p, expected, rtol=1e-6)
    np.testing.assert_allclose(np.abs(p), lr * np.abs(g) / (np.abs(g) + eps), rtol=1e-5)


def test_adam_constant_gradient_monotone_on_quadratic():
    # feed the same gradient for 100 steps; the quadratic loss at the updated
    # parameter must fall monotonically (steps stay within the descent range)
    p = np.array([2.0], dtype=np.float32)
    g = np.array([4.0], dtype=np.float32)  # gradient of p^2 at the start
    m = np.zeros(1, dtype=np.float32)
    v = np.zeros(1, dtype=np.float32)
    losses = [float(p[0] ** 2)]
    for t_step in range(1, 101):
        nn.adam_step(p, g, m, v, t=t_step)
        losses.append(float(p[0] ** 2))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_full_loop_converges_on_quadratic():
    rng = np.random.default_rng(19)
    target = rng.normal(size=6).astype(np.float32)
    p = nn.Tensor(np.zeros(6, dtype=np.float32), requires_grad=True)
    opt = nn.Adam([p], lr=0.02)
    first = last = None
    for _ in range(300):
        opt.zero_grad()
        diff = p - nn.Tensor(target)
        loss = (diff * diff).sum()
        loss.backward()
        last = float(loss.data)
        if first is None:
            first = last
        opt.step()
    assert last < first * 0.01


# -- checkpoints --

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(20)
    mlp = nn.Mlp([4, 6, 2], rng)
    path = str(tmp_path / "model.ckpt")
    nn.save_checkpoint(path, {"arch": {"dims": [4, 6, 2]}, "kind": "mlp"}, mlp.params())
    header, buffers = nn.load_checkpoint(path)
    assert header["kind"] == "mlp"
    assert header["format"] == 1
    mlp2 = nn.Mlp([4, 6, 2], np.random.default_rng(999))
    nn.assign_params(mlp2.params(), buffers)
    x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    np.testing.assert_array_equal(mlp(nn.Tensor(x)).data, mlp2(nn.Tensor(x)).data)


def test_checkpoint_shape_guard(tmp_path):
    rng = np.random.default_rng(21)
    mlp = nn.Mlp([4, 6, 2], rng)
    path = str(tmp_path / "model.ckpt")
    nn.save_checkpoint(path, {}, mlp.params())
    _, buffers = nn.load_checkpoint(path)
    other = nn.Mlp([4, 5, 2], rng)
    with pytest.raises(nn.ShapeMismatch):
        nn.assign_params(other.params(), buffers)


def test_inference_mode_builds_no_graph():
    x = t(np.ones(3))
    with nn.inference_mode():
        y = (x * 2).gelu()
    assert y._parents == ()
    assert not y.requires_grad


def test_nan_debug_poison():
    nn.set_nan_debug(True)
    try:
        x = nn.Tensor(np.array([1000.0], dtype=np.float32))
        with pytest.raises(FloatingPointError):
            (x * x).exp()
    finally:
        nn.set_nan_debug(False)
