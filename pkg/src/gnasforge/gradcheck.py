"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def finite_difference_check(f, x, h=1e-5):
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central finite differences.

    ``f`` maps a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - fd| / max(1, |analytic|).
    """
    x = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(x)
    if not np.isfinite(out.data).all():
        raise ValueError("finite_difference_check: non-finite forward value")
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(x.data)).item()
        flat[i] = orig - h
        lo = f(Tensor(x.data)).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError("finite_difference_check: non-finite perturbed value")
        fd[i] = (hi - lo) / (2.0 * h)

    err = np.abs(analytic.reshape(-1) - fd) / np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(err.max()) if err.size else 0.0


def check_params(build_loss, store, names, h=1e-5):
    """Finite-difference check of d(loss)/d(param) for named store parameters.

    ``build_loss`` takes no arguments and rebuilds the scalar loss from the
    current parameter values (so the whole tape is reconstructed per probe).
    Returns the max relative error across all coordinates of all params.
    """
    store.zero_grad()
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for name in names:
        p = store[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = build_loss().item()
            flat[i] = orig - h
            lo = build_loss().item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * h)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            worst = max(worst, err)
    store.zero_grad()
    return worst
