"""Shared test oracles: finite-difference gradient checking and small utilities."""

import numpy as np

from kdpaths import tensor_engine as te


def numerical_grad(fn, x: te.Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the scalar fn() w.r.t. x.data.

    fn must rebuild its forward pass from the current contents of x.data
    on every call.  Runs under no_grad so probing never touches the tape.
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with te.no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = float(fn().data)
            flat[i] = keep - h
            fm = float(fn().data)
            flat[i] = keep
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grad(fn, x: te.Tensor) -> np.ndarray:
    """Tape gradient of the scalar fn() w.r.t. the leaf x."""
    x.zero_grad()
    loss = fn()
    te.backward(loss)
    return x.grad.copy()


def assert_grad_close(fn, x: te.Tensor, h: float = 1e-4, rel: float = 1e-3,
                      kink_gap: float = 1e-6):
    """Check tape gradient against central differences at relative tolerance.

    Coordinates whose numerical and analytic gradients are both tiny are
    compared absolutely; callers are responsible for keeping probe points
    at least kink_gap away from non-differentiable kinks.
    """
    num = numerical_grad(fn, x, h=h)
    ana = analytic_grad(fn, x)
    denom = np.maximum(np.abs(num), np.abs(ana))
    denom = np.maximum(denom, 1e-6)
    err = np.abs(num - ana) / denom
    worst = float(err.max()) if err.size else 0.0
    assert worst <= rel, f"gradient mismatch: worst rel err {worst:.3e}"
    return worst


def away_from_relu_kink(rng, shape, gap=1e-2, scale=1.0):
    """Random array whose entries stay at least gap away from zero."""
    signs = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return signs * (gap + np.abs(rng.normal(size=shape)) * scale)


def kink_adjustment(vals: np.ndarray, gap: float = 0.05) -> te.Tensor:
    """Constant that, added to vals, pushes every coordinate >= gap from zero.

    Computed once per test case and captured, so finite-difference probes of
    the surrounding function never cross a relu kink while the gradient path
    through the original values is unchanged.
    """
    signs = np.where(vals >= 0.0, 1.0, -1.0)
    target = signs * np.maximum(np.abs(vals), gap)
    return te.constant(target - vals)
