"""Reference selection, the memory bank, and the memory-attention stack.

The attention stack is frozen: four layers of (self-attention, cross-attention
to every bank entry, feed-forward), each wrapped in a residual connection with
a parameter-free pre-LayerNorm. A sinusoidal encoding of each entry's temporal
position is added to the cross-attention keys.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .frozen import kaiming_uniform, params_checksum, philox
from .tensor import Tensor, attention_core
from .tensor.io import read_tensor, write_tensor

N_LAYERS = 4
DEFAULT_CAP_ROLLING = 6
LN_EPS = 1e-5


def cosine_similarity(fq: Tensor, fs: Tensor) -> float:
    """Cosine of the angle between the fully flattened maps.

    Returns 0.0 when either map is all-zero so rankings stay total.
    """
    if fq.dims != fs.dims:
        raise ShapeError(f"cosine_similarity: {fq.dims} vs {fs.dims}")
    a = fq.data.reshape(-1).astype(np.float64)
    b = fs.data.reshape(-1).astype(np.float64)
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def rank_by_similarity(sims) -> list[int]:
    return sorted(range(len(sims)), key=lambda i: (-sims[i], i))


def select_references(fq: Tensor, training_feats: list[Tensor], k: int = 2) -> list[int]:
    """Indices of the ``k`` most similar training maps, most similar first.

    Ties go to the lower index.
    """
    if not training_feats:
        raise ConfigError("reference selection needs at least one training frame")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    sims = [cosine_similarity(fq, fs) for fs in training_feats]
    return rank_by_similarity(sims)[:k]


@dataclass
class MemoryEntry:
    memory: Tensor
    temporal_pos: int = 0
    pinned: bool = False

    def __post_init__(self):
        if self.temporal_pos < 0:
            raise ValueError("temporal_pos must be >= 0")
        if self.pinned and self.temporal_pos != 0:
            raise ValueError("pinned entries carry temporal_pos 0")


@dataclass
class MemoryBank:
    cap_rolling: int = DEFAULT_CAP_ROLLING
    pinned: list[MemoryEntry] = field(default_factory=list)
    rolling: deque = field(default=None)
    entry_dims: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.cap_rolling < 0:
            raise ConfigError("cap_rolling must be >= 0")
        self.rolling = deque(self.rolling or (), maxlen=self.cap_rolling)

    def __len__(self):
        return len(self.pinned) + len(self.rolling)

    def entries(self) -> list[MemoryEntry]:
        return list(self.pinned) + list(self.rolling)

    def insert(self, entry: MemoryEntry) -> None:
        bank_insert(self, entry)

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.cap_rolling, list(self.pinned), deque(self.rolling), self.entry_dims)


def bank_insert(bank: MemoryBank, entry: MemoryEntry) -> None:
    dims = entry.memory.dims
    if bank.entry_dims is None:
        bank.entry_dims = dims
    elif dims != bank.entry_dims:
        raise ShapeError(f"bank entries are {bank.entry_dims}, got {dims}")
    if entry.pinned:
        bank.pinned.append(entry)
    else:
        # deque(maxlen) drops the oldest
        bank.rolling.append(entry)


def save_bank(bank: MemoryBank, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = []
    for i, e in enumerate(bank.entries()):
        name = f"entry_{i:03d}.otns"
        write_tensor(d / name, e.memory)
        meta.append({"file": name, "pinned": e.pinned, "temporal_pos": e.temporal_pos})
    (d / "bank.json").write_text(json.dumps(
        {"cap_rolling": bank.cap_rolling, "entries": meta}, indent=2) + "\n")


def load_bank(directory) -> MemoryBank:
    d = Path(directory)
    meta = json.loads((d / "bank.json").read_text())
    bank = MemoryBank(cap_rolling=meta["cap_rolling"])
    for e in meta["entries"]:
        bank_insert(bank, MemoryEntry(read_tensor(d / e["file"]), e["temporal_pos"], e["pinned"]))
    return bank


@dataclass(frozen=True)
class AttentionParams:
    C: int
    D: int
    seed: int
    layers: tuple[dict, ...] = field(repr=False)

    def arrays(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.items():
                yield f"layer{i}.{name}", arr


# Projections that write into the residual stream start damped so the stacked
# layers do not blow up the feature scale at init.
RESIDUAL_INIT_SCALE = 0.3
_RESIDUAL_OUT = ("sa_o", "ca_o", "ff2")


def init_attention(seed: int, C: int, D: int, n_layers: int = N_LAYERS) -> AttentionParams:
    rng = philox(seed)
    shapes = {
        "sa_q": (C, C), "sa_k": (C, C), "sa_v": (C, C), "sa_o": (C, C),
        "ca_q": (C, C), "ca_k": (C, D), "ca_v": (C, D), "ca_o": (C, C),
        "ff1": (2 * C, C), "ff2": (C, 2 * C),
    }
    layers = []
    for _ in range(n_layers):
        layer = {}
        for name, shape in shapes.items():
            # stored as (out, in); kaiming fan_in is shape[1]
            w = kaiming_uniform(rng, shape)
            if name in _RESIDUAL_OUT:
                w *= np.float32(RESIDUAL_INIT_SCALE)
            w.flags.writeable = False
            layer[name] = w
        layer["ff1_b"] = np.zeros(2 * C, dtype=np.float32)
        layer["ff2_b"] = np.zeros(C, dtype=np.float32)
        layer["ff1_b"].flags.writeable = False
        layer["ff2_b"].flags.writeable = False
        layers.append(layer)
    return AttentionParams(C=C, D=D, seed=int(seed), layers=tuple(layers))


def zeroed_attention(params: AttentionParams) -> AttentionParams:
    """All projection and FFN weights set to zero (test hook)."""
    layers = tuple({k: np.zeros_like(v) for k, v in layer.items()} for layer in params.layers)
    return AttentionParams(params.C, params.D, params.seed, layers)


def attention_checksum(params: AttentionParams) -> str:
    return params_checksum(dict(params.arrays()))


def sinusoidal_encoding(pos: int, dim: int) -> np.ndarray:
    i = np.arange(dim // 2, dtype=np.float64)
    freq = 1.0 / (10000.0 ** (2.0 * i / dim))
    enc = np.zeros(dim, dtype=np.float64)
    enc[0:2 * len(i):2] = np.sin(pos * freq)
    enc[1:2 * len(i):2] = np.cos(pos * freq)
    return enc


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def attend(params: AttentionParams, fq: Tensor, bank: MemoryBank) -> Tensor:
    """Memory-conditioned features E1, same shape as ``fq``."""
    entries = bank.entries()
    if not entries:
        raise StateError("memory attention launched with no references")
    c, h, w = fq.dims
    if c != params.C:
        raise ShapeError(f"query features have {c} channels, attention expects {params.C}")
    x = fq.data.reshape(c, h * w).T.astype(np.float64)

    mem_tokens = []
    key_pos = []
    for e in entries:
        m = e.memory.data
        if m.shape[0] != params.D or m.shape[1:] != (h, w):
            raise ShapeError(f"memory entry {m.shape} incompatible with query {fq.dims}")
        mem_tokens.append(m.reshape(params.D, h * w).T)
        key_pos.append(np.broadcast_to(sinusoidal_encoding(e.temporal_pos, c), (h * w, c)))
    mem = np.concatenate(mem_tokens, axis=0).astype(np.float64)
    pos = np.concatenate(key_pos, axis=0)

    for layer in params.layers:
        L = {k: v.astype(np.float64) for k, v in layer.items()}
        y = _layer_norm(x)
        x = x + attention_core(y @ L["sa_q"].T, y @ L["sa_k"].T, y @ L["sa_v"].T).astype(np.float64) @ L["sa_o"].T
        y = _layer_norm(x)
        keys = mem @ L["ca_k"].T + pos
        x = x + attention_core(y @ L["ca_q"].T, keys, mem @ L["ca_v"].T).astype(np.float64) @ L["ca_o"].T
        y = _layer_norm(x)
        hidden = np.maximum(y @ L["ff1"].T + L["ff1_b"], 0.0)
        x = x + hidden @ L["ff2"].T + L["ff2_b"]
    return Tensor(x.T.reshape(c, h, w))
