"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Tape, Tensor

FD_EPS = 1e-2


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = FD_EPS) -> float:
    """Max over coordinates of ``|a - n| / max(1, |a|, |n|)``.

    ``a`` is the tape gradient of scalar ``f`` at ``x``, ``n`` the central
    difference with step ``eps`` evaluated in float32.
    """
    x = Tensor(x.data, copy=True)
    with Tape() as tape:
        tape.watch(x)
        y = f(x)
    (analytic,) = tape.gradient(y, [x])
    analytic = analytic.astype(np.float64).reshape(-1)

    base = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += np.float32(eps)
        minus = base.copy()
        minus[i] -= np.float32(eps)
        fp = f(Tensor(plus.reshape(x.dims))).item()
        fm = f(Tensor(minus.reshape(x.dims))).item()
        # actual f32 step, which differs slightly from eps
        numeric[i] = (fp - fm) / (float(plus[i]) - float(minus[i]))
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
