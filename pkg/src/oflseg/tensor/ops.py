"""The op set used by the pipeline.

Every op records itself on the active tape (if any) when at least one input
is tracked. Forward values are float32; backward passes accumulate in float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError, ValidationError
from .core import Tensor, as_tensor, record

BCE_CLAMP = 1e-6
DICE_EPS = 1.0


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{what}: shape mismatch {a.dims} vs {b.dims}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (C*k*k, H*W) patch matrix with zero same-padding."""
    c, h, w = x.shape
    p = k // 2
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # C, H, W, k, k
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def conv2d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Same-padded stride-1 cross-correlation on plain arrays."""
    c_out, c_in, k, _ = w.shape
    _, h, wd = x.shape
    cols = _im2col(x, k)
    out = (w.reshape(c_out, c_in * k * k) @ cols).reshape(c_out, h, wd)
    if b is not None:
        out = out + b.reshape(c_out, 1, 1)
    return out


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None) -> None:
    if len(x.dims) != 3:
        raise ShapeError(f"conv2d input must be C×H×W, got {x.dims}")
    if len(w.dims) != 4:
        raise ShapeError(f"conv2d weights must be Cout×Cin×k×k, got {w.dims}")
    c_out, c_in, k, k2 = w.dims
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {k}×{k2}")
    if c_in != x.dims[0]:
        raise ShapeError(f"conv2d channel mismatch: input {x.dims[0]}, weights {c_in}")
    if b is not None and b.dims != (c_out,):
        raise ShapeError(f"conv2d bias must be ({c_out},), got {b.dims}")


def conv2d_grads(upstream: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Gradients of a same-padded convolution.

    Returns ``(grad_input, grad_weights, grad_bias)``. The input gradient is
    the transposed convolution, i.e. a correlation with the spatially flipped,
    channel-transposed kernel.
    """
    c_out, c_in, k, _ = w.shape
    if upstream.shape != (c_out,) + x.shape[1:]:
        raise ShapeError(f"conv2d_grads: upstream {upstream.shape} inconsistent with "
                         f"input {x.shape} and weights {w.shape}")
    up = np.asarray(upstream, dtype=np.float64)
    up2 = up.reshape(c_out, -1)
    cols = _im2col(np.asarray(x, dtype=np.float64), k)
    grad_w = (up2 @ cols.T).reshape(w.shape)
    w_t = np.flip(np.asarray(w, dtype=np.float64), axis=(2, 3)).transpose(1, 0, 2, 3)
    grad_x = conv2d_raw(up, w_t)
    grad_b = up2.sum(axis=1)
    return grad_x, grad_w, grad_b


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    _check_conv(x, w, b)
    out = Tensor(conv2d_raw(x.data, w.data, None if b is None else b.data))
    inputs = (x, w) if b is None else (x, w, b)

    def backward(up):
        gx, gw, gb = conv2d_grads(up, x.data, w.data)
        return (gx, gw) if b is None else (gx, gw, gb)

    return record(out, inputs, backward)


def sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_raw(x.data)
    out = Tensor(s)
    s64 = s.astype(np.float64)
    return record(out, (x,), lambda up: (up * s64 * (1.0 - s64),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return record(out, (x,), lambda up: (up * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return record(Tensor(a.data + b.data), (a, b), lambda up: (up, up))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return record(Tensor(a.data - b.data), (a, b), lambda up: (up, -up))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    return record(Tensor(a.data * b.data), (a, b), lambda up: (up * bd, up * ad))


def scale(x: Tensor, factor: float, offset: float = 0.0) -> Tensor:
    """``factor * x + offset``."""
    out = Tensor(np.float32(factor) * x.data + np.float32(offset))
    return record(out, (x,), lambda up: (up * factor,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if len(a.dims) != 3 or len(b.dims) != 3 or a.dims[1:] != b.dims[1:]:
        raise ShapeError(f"concat_channels: incompatible {a.dims} and {b.dims}")
    ca = a.dims[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))
    return record(out, (a, b), lambda up: (up[:ca], up[ca:]))


def broadcast_mul_spatialmap(m: Tensor, x: Tensor) -> Tensor:
    """Multiply a 1×H×W map into every channel of a C×H×W tensor."""
    if len(m.dims) != 3 or m.dims[0] != 1 or len(x.dims) != 3 or m.dims[1:] != x.dims[1:]:
        raise ShapeError(f"broadcast_mul_spatialmap: map {m.dims} vs tensor {x.dims}")
    md = m.data.astype(np.float64)
    xd = x.data.astype(np.float64)
    out = Tensor(m.data * x.data)
    return record(out, (m, x), lambda up: ((up * xd).sum(axis=0, keepdims=True), up * md))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if len(x.dims) != 3:
        raise ShapeError(f"upsample_nearest needs C×H×W, got {x.dims}")
    c, h, w = x.dims
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2))

    def backward(up):
        return (up.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return record(out, (x,), backward)


def reshape(x: Tensor, *dims: int) -> Tensor:
    orig = x.dims
    out = Tensor(x.data.reshape(dims))
    return record(out, (x,), lambda up: (up.reshape(orig),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.float32(x.data.astype(np.float64).mean()))
    return record(out, (x,), lambda up: (np.full(x.dims, float(up.reshape(-1)[0]) / n),))


def sum_squares(x: Tensor) -> Tensor:
    xd = x.data.astype(np.float64)
    out = Tensor(np.float32((xd * xd).sum()))
    return record(out, (x,), lambda up: (2.0 * float(up.reshape(-1)[0]) * xd,))


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """2×2 average pooling with stride 2 on a (C, H, W) array (untaped)."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}×{w}")
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4), dtype=np.float64).astype(np.float32)


def softmax_rows(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def attention_core(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(Q Kᵀ / sqrt(d)) V with row-wise softmax (untaped)."""
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention_core operands must be 2-D")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0] or q.shape[0] < 1 or k.shape[0] < 1:
        raise ShapeError(f"attention_core: incompatible q{q.shape} k{k.shape} v{v.shape}")
    d = q.shape[1]
    scores = (q.astype(np.float64) @ k.T.astype(np.float64)) / np.sqrt(d)
    return (softmax_rows(scores) @ v.astype(np.float64)).astype(np.float32)


def _check_binary(gt: np.ndarray) -> None:
    if not np.all((gt == 0) | (gt == 1)):
        raise ValidationError("ground-truth mask must be binary {0, 1}")


def bce(p: Tensor, gt) -> Tensor:
    """Mean binary cross-entropy, probabilities clamped to [1e-6, 1-1e-6]."""
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if g.shape != p.dims:
        raise ShapeError(f"bce: prediction {p.dims} vs target {g.shape}")
    _check_binary(g)
    raw = p.data.astype(np.float64)
    pc = np.clip(raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = pc.size
    val = -np.mean(g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc))
    inside = (raw > BCE_CLAMP) & (raw < 1.0 - BCE_CLAMP)

    def backward(up):
        d = (-(g / pc) + (1.0 - g) / (1.0 - pc)) / n
        return (float(up.reshape(-1)[0]) * d * inside,)

    return record(Tensor(np.float32(val)), (p,), backward)


def soft_dice(p: Tensor, gt) -> Tensor:
    """``1 - (2 Σ p·g + eps) / (Σ p + Σ g + eps)`` with eps = 1."""
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if g.shape != p.dims:
        raise ShapeError(f"soft_dice: prediction {p.dims} vs target {g.shape}")
    _check_binary(g)
    pd = p.data.astype(np.float64)
    num = 2.0 * (pd * g).sum() + DICE_EPS
    den = pd.sum() + g.sum() + DICE_EPS
    val = 1.0 - num / den

    def backward(up):
        d = -(2.0 * g * den - num) / (den * den)
        return (float(up.reshape(-1)[0]) * d,)

    return record(Tensor(np.float32(val)), (p,), backward)


def losses(p: Tensor, gt) -> tuple[Tensor, Tensor]:
    return bce(p, gt), soft_dice(p, gt)


def combined_loss(p: Tensor, gt) -> Tensor:
    """BCE + soft Dice, unit weights."""
    b, d = losses(p, gt)
    return add(b, d)


__all__ = [
    "Tensor", "as_tensor", "conv2d", "conv2d_raw", "conv2d_grads", "sigmoid", "sigmoid_raw",
    "relu", "add", "sub", "mul", "scale", "concat_channels", "broadcast_mul_spatialmap",
    "upsample_nearest", "reshape", "mean", "sum_squares", "avg_pool2", "attention_core",
    "softmax_rows", "bce", "soft_dice", "losses", "combined_loss",
]
