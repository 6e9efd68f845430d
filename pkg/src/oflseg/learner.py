"""Online few-shot learner for the mapping network.

The mapping network is a single bias-free convolution ``tau`` (stored as
D×C×k×k) from generic features to memory features. It is fitted by steepest
descent on the ridge objective

    L(tau) = 1/2 sum_i w_i ||conv(F_i, tau) - M_i||^2 + lam/2 ||tau||^2

Because L is quadratic, the line search along the negative gradient ``g`` has
the closed form ``alpha = <g, g> / (sum_i w_i ||conv(F_i, g)||^2 + lam <g, g>)``.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .tensor import Tensor, conv2d
from .tensor.ops import _im2col

DEFAULT_LAMBDA = 0.05
DEFAULT_CAP_BUFFER = 16
GRAD_FLOOR = 1e-20


@dataclass(frozen=True)
class MappingWeights:
    tau: np.ndarray
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")
        if self.tau.ndim != 4 or self.tau.shape[2] != self.tau.shape[3] or self.tau.shape[2] % 2 == 0:
            raise ShapeError(f"tau must be D×C×k×k with odd k, got {self.tau.shape}")

    @classmethod
    def zeros(cls, C: int, D: int, k: int = 3, lam: float = DEFAULT_LAMBDA) -> "MappingWeights":
        return cls(np.zeros((D, C, k, k), dtype=np.float32), lam)

    @property
    def k(self) -> int:
        return self.tau.shape[2]

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.tau, dtype=np.float32).tobytes()).hexdigest()


@dataclass
class Sample:
    features: Tensor
    target: Tensor
    weight: float = 1.0
    seed: bool = False
    _cols: dict = field(default_factory=dict, repr=False, compare=False)

    def cols(self, k: int) -> np.ndarray:
        """Cached float64 patch matrix (C*k*k, H*W)."""
        if k not in self._cols:
            self._cols[k] = _im2col(self.features.data.astype(np.float64), k)
        return self._cols[k]


class SampleBuffer:
    """Training samples for the learner.

    Seed samples (labelled training frames) are never evicted. Online samples
    are evicted oldest first once the buffer holds ``capacity`` samples; at
    least one online slot is always kept so a refinement sees its new sample.
    """

    def __init__(self, capacity: int = DEFAULT_CAP_BUFFER, samples=()):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.samples: list[Sample] = []
        for s in samples:
            self._append(s)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def n_seed(self) -> int:
        return sum(s.seed for s in self.samples)

    def _append(self, s: Sample) -> None:
        if s.weight < 0:
            raise ValueError("sample weight must be >= 0")
        if self.samples:
            ref = self.samples[0]
            if s.features.dims != ref.features.dims or s.target.dims != ref.target.dims:
                raise ShapeError(f"sample shapes {s.features.dims}/{s.target.dims} differ from "
                                 f"buffer {ref.features.dims}/{ref.target.dims}")
        if s.features.dims[1:] != s.target.dims[1:]:
            raise ShapeError("features and target must share spatial dims")
        self.samples.append(s)
        online_cap = max(self.capacity - self.n_seed, 1)
        online = [i for i, x in enumerate(self.samples) if not x.seed]
        while len(online) > online_cap:
            del self.samples[online.pop(0)]
            online = [i for i, x in enumerate(self.samples) if not x.seed]

    def with_sample(self, s: Sample) -> "SampleBuffer":
        out = SampleBuffer(self.capacity)
        out.samples = list(self.samples)
        out._append(s)
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(s.features.data.tobytes())
            h.update(s.target.data.tobytes())
            h.update(np.float64(s.weight).tobytes())
            h.update(b"S" if s.seed else b"O")
        return h.hexdigest()


def _require(buf: SampleBuffer) -> None:
    if len(buf) == 0:
        raise StateError("few-shot learner needs a non-empty sample buffer")


def _predict(tau2: np.ndarray, s: Sample, k: int) -> np.ndarray:
    return tau2 @ s.cols(k)


def _loss64(tau: np.ndarray, lam: float, buf: SampleBuffer) -> float:
    d = tau.shape[0]
    k = tau.shape[2]
    tau2 = tau.reshape(d, -1).astype(np.float64)
    total = 0.0
    for s in buf:
        r = _predict(tau2, s, k) - s.target.data.reshape(d, -1)
        total += 0.5 * s.weight * float(np.sum(r * r))
    return total + 0.5 * lam * float(np.sum(tau2 * tau2))


def learner_loss(mw: MappingWeights, buf: SampleBuffer) -> float:
    _require(buf)
    _check_buffer(mw, buf)
    return _loss64(mw.tau, mw.lam, buf)


def learner_gradient(mw: MappingWeights, buf: SampleBuffer) -> np.ndarray:
    _require(buf)
    _check_buffer(mw, buf)
    d = mw.tau.shape[0]
    k = mw.k
    tau2 = mw.tau.reshape(d, -1).astype(np.float64)
    g = mw.lam * tau2
    for s in buf:
        cols = s.cols(k)
        r = tau2 @ cols - s.target.data.reshape(d, -1)
        g = g + s.weight * (r @ cols.T)
    return g.reshape(mw.tau.shape)


def sd_step(mw: MappingWeights, buf: SampleBuffer):
    """One exact-line-search steepest-descent step.

    Returns ``(new_weights, loss_before, loss_after, step_length)``.
    """
    _require(buf)
    _check_buffer(mw, buf)
    loss_before = _loss64(mw.tau, mw.lam, buf)
    g = learner_gradient(mw, buf)
    gg = float(np.sum(g * g))
    if gg < GRAD_FLOOR:
        return mw, loss_before, loss_before, 0.0
    d = g.shape[0]
    g2 = g.reshape(d, -1)
    curv = mw.lam * gg
    for s in buf:
        q = g2 @ s.cols(mw.k)
        curv += s.weight * float(np.sum(q * q))
    alpha = gg / curv
    tau = (mw.tau.astype(np.float64) - alpha * g).astype(np.float32)
    new = MappingWeights(tau, mw.lam)
    return new, loss_before, _loss64(tau, mw.lam, buf), alpha


def _check_buffer(mw: MappingWeights, buf: SampleBuffer) -> None:
    s = buf.samples[0]
    d, c = mw.tau.shape[:2]
    if s.features.dims[0] != c or s.target.dims[0] != d:
        raise ShapeError(f"tau {mw.tau.shape} incompatible with samples "
                         f"{s.features.dims} -> {s.target.dims}")


@dataclass
class FitResult:
    weights: MappingWeights
    trace: list[float]
    steps: list[float]

    def __iter__(self):
        # allows ``mw, trace = fit(...)``
        return iter((self.weights, self.trace))


def fit(buf: SampleBuffer, iters: int, init: MappingWeights | None = None, *,
        C: int | None = None, D: int | None = None, k: int = 3,
        lam: float = DEFAULT_LAMBDA) -> FitResult:
    """Run ``iters`` steepest-descent steps from ``init`` (zeros by default).

    ``trace[0]`` is the initial loss, ``trace[i]`` the loss after step ``i``.
    """
    if iters < 0:
        raise ConfigError("iters must be >= 0")
    _require(buf)
    if init is None:
        s = buf.samples[0]
        init = MappingWeights.zeros(C or s.features.dims[0], D or s.target.dims[0], k, lam)
    mw = init
    trace = [learner_loss(mw, buf)]
    steps = []
    for _ in range(iters):
        mw, _, after, alpha = sd_step(mw, buf)
        trace.append(after)
        steps.append(alpha)
    return FitResult(mw, trace, steps)


def apply_mapping(mw: MappingWeights, fq: Tensor) -> Tensor:
    """Raw target features (D channels) for a query feature map."""
    if len(fq.dims) != 3 or fq.dims[0] != mw.tau.shape[1]:
        raise ShapeError(f"query features {fq.dims} incompatible with tau {mw.tau.shape}")
    return conv2d(fq, Tensor(mw.tau))


def online_refine(mw: MappingWeights, buf: SampleBuffer, new_sample: Sample, iters: int = 5):
    """Append ``new_sample`` and continue fitting from ``mw``.

    Returns ``(new_weights, new_buffer)``; the inputs are left untouched.
    """
    buf2 = buf.with_sample(new_sample)
    return fit(buf2, iters, mw).weights, buf2


def write_trace_csv(path, trace: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
