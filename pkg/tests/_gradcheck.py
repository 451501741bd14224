"""Central finite-difference gradient oracle shared by the nn tests and the
acceptance suite."""

import numpy as np


def finite_diff_grad(build_loss, param, h=1e-3):
    """Numerical d(loss)/d(param) by central differences, perturbing the
    float32 buffer in place."""
    flat = param.data.reshape(-1)
    num = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = float(build_loss().data)
        flat[i] = orig - h
        lm = float(build_loss().data)
        flat[i] = orig
        num[i] = (lp - lm) / (2.0 * h)
    return num.reshape(param.data.shape)


def check_gradients(build_loss, params, h=1e-3, rtol=1e-3, atol=5e-4):
    """Backprop through build_loss() and compare against central differences
    for every tensor in params.  Returns the worst scaled error seen."""
    for p in params:
        p.grad = None
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for p in params:
        assert p.grad is not None, "no gradient reached a parameter"
        ana = p.grad.astype(np.float64)
        num = finite_diff_grad(build_loss, p, h=h)
        err = np.abs(ana - num)
        tol = rtol * np.maximum(np.abs(ana), np.abs(num)) + atol
        if not np.all(err <= tol):
            bad = np.unravel_index(np.argmax(err - tol), err.shape)
            raise AssertionError(
                f"gradient mismatch at {bad}: analytic={ana[bad]:.6g} "
                f"numeric={num[bad]:.6g} shape={p.data.shape}")
        scaled = err / np.maximum(np.maximum(np.abs(ana), np.abs(num)), atol / rtol)
        worst = max(worst, float(scaled.max()))
    return worst
