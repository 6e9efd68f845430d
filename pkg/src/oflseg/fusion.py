"""Adaptive feature fusion, the D->C converter, and offline training.

These two small convolutions are the only trainable parameters. Training
pushes a combined BCE + soft-Dice loss back through the frozen decoder into
them with AdamW; every other network stays fixed.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig, TrainConfig
from .errors import ConfigError, ShapeError
from .frozen import StackParams, decode_mask, encode_image, encode_memory, kaiming_uniform, philox
from .learner import MappingWeights, Sample, SampleBuffer, apply_mapping, fit
from .memory import (
    AttentionParams, MemoryBank, MemoryEntry, attend, attention_checksum, bank_insert,
    select_references,
)
from .tensor import (
    Tape, Tensor, add, broadcast_mul_spatialmap, combined_loss, concat_channels, conv2d, scale,
    sigmoid,
)
from .tensor.io import read_tensor, write_tensor

PARAM_NAMES = ("weight_net.w", "weight_net.b", "converter.w", "converter.b")


@dataclass
class FusionParams:
    weight_net_w: np.ndarray  # 1 × 2C × 3 × 3
    weight_net_b: np.ndarray  # 1
    converter_w: np.ndarray  # C × D × 1 × 1
    converter_b: np.ndarray  # C

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(zip(PARAM_NAMES, (self.weight_net_w, self.weight_net_b,
                                      self.converter_w, self.converter_b)))

    def copy(self) -> "FusionParams":
        return FusionParams(*(a.copy() for a in self.arrays().values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, a in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(a, dtype=np.float32).tobytes())
        return h.hexdigest()

    @property
    def C(self) -> int:
        return self.converter_w.shape[0]

    @property
    def D(self) -> int:
        return self.converter_w.shape[1]


def init_fusion(seed: int, C: int, D: int) -> FusionParams:
    """Kaiming converter; the weight net starts at zero so W = 0.5 everywhere."""
    rng = philox(seed)
    return FusionParams(
        weight_net_w=np.zeros((1, 2 * C, 3, 3), dtype=np.float32),
        weight_net_b=np.zeros(1, dtype=np.float32),
        converter_w=kaiming_uniform(rng, (C, D, 1, 1)),
        converter_b=np.zeros(C, dtype=np.float32),
    )


def convert(fp: FusionParams, e2_raw: Tensor, w: Tensor | None = None,
            b: Tensor | None = None) -> Tensor:
    """1×1 convolution from D to C channels.

    ``w``/``b`` let a caller pass the tensors it is watching on a tape.
    """
    if len(e2_raw.dims) != 3 or e2_raw.dims[0] != fp.D:
        raise ShapeError(f"converter expects {fp.D}×H×W input, got {e2_raw.dims}")
    return conv2d(e2_raw, w if w is not None else Tensor(fp.converter_w),
                  b if b is not None else Tensor(fp.converter_b))


def fuse(fp: FusionParams, e1: Tensor, e2: Tensor, w: Tensor | None = None,
         b: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """``W = sigmoid(G([e1, e2]))``, ``e_tar = W*e1 + (1-W)*e2``.

    W is a single spatial map broadcast over channels.
    """
    if e1.dims != e2.dims:
        raise ShapeError(f"fuse: e1 {e1.dims} vs e2 {e2.dims}")
    logits = conv2d(concat_channels(e1, e2), w if w is not None else Tensor(fp.weight_net_w),
                    b if b is not None else Tensor(fp.weight_net_b))
    w_map = sigmoid(logits)
    e_tar = add(broadcast_mul_spatialmap(w_map, e1),
                broadcast_mul_spatialmap(scale(w_map, -1.0, 1.0), e2))
    return e_tar, w_map


def average(e1: Tensor, e2: Tensor) -> Tensor:
    """Fixed 0.5/0.5 mix used when the learner runs without the fusion module."""
    return add(scale(e1, 0.5), scale(e2, 0.5))


def fused_features(cfg: PipelineConfig, fp: FusionParams | None, e1: Tensor,
                   e2_raw: Tensor | None, watched: dict | None = None) -> Tensor:
    """Decoder input for the configured ablation."""
    if not cfg.use_learner:
        return e1
    watched = watched or {}
    e2 = convert(fp, e2_raw, watched.get("converter.w"), watched.get("converter.b"))
    if cfg.use_afm:
        return fuse(fp, e1, e2, watched.get("weight_net.w"), watched.get("weight_net.b"))[0]
    return average(e1, e2)


def frame_loss(cfg: PipelineConfig, stack: StackParams, fp: FusionParams, e1: Tensor,
               e2_raw: Tensor, gt: np.ndarray, tape: Tape | None = None):
    """Combined loss of one frame; with a tape, also the FusionParams gradients."""
    if tape is None:
        p = decode_mask(stack, fused_features(cfg, fp, e1, e2_raw))
        return combined_loss(p, gt).item(), None
    watched = {name: Tensor(a, copy=True) for name, a in fp.arrays().items()}
    with tape:
        tape.watch(*watched.values())
        p = decode_mask(stack, fused_features(cfg, fp, e1, e2_raw, watched), taped=True)
        loss = combined_loss(p, gt)
    grads = tape.gradient(loss, list(watched.values()))
    return loss.item(), dict(zip(watched, grads))


class AdamW:
    """Decoupled-weight-decay Adam over a dict of float32 arrays."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-4):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k].astype(np.float64)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p64 = p.astype(np.float64)
            p64 -= lr * self.weight_decay * p64
            p64 -= lr * upd
            p[...] = p64.astype(np.float32)


@dataclass
class LabeledFrame:
    image: np.ndarray  # 3×H×W in [0, 1]
    mask: np.ndarray  # H×W in {0, 1}
    seq_id: str = ""
    index: int = 0


@dataclass
class PreparedFrame:
    """Fusion-independent quantities of one training frame, computed once."""
    feats: Tensor
    target: Tensor
    mask: np.ndarray
    e1: Tensor | None = None
    e2_raw: Tensor | None = None
    refs: list[int] = field(default_factory=list)
    fit_trace: list[float] = field(default_factory=list)


def prepare_training(cfg: PipelineConfig, stack: StackParams, attn: AttentionParams,
                     train_set: list[LabeledFrame]) -> list[PreparedFrame]:
    """Leave-one-out branch outputs for every training frame.

    For frame i the references come from the other frames (top-k cosine
    similarity) and tau is fitted on the other frames' (features, memory) pairs.
    Both only depend on frozen networks, so they are computed once up front.
    """
    if len(train_set) < 2:
        raise ConfigError("offline training needs at least two labelled frames")
    prepared = []
    for fr in train_set:
        feats = encode_image(stack, fr.image)
        prepared.append(PreparedFrame(feats, encode_memory(stack, feats, fr.mask),
                                      np.asarray(fr.mask, dtype=np.float32)))
    for i, pf in enumerate(prepared):
        others = [j for j in range(len(prepared)) if j != i]
        picks = select_references(pf.feats, [prepared[j].feats for j in others], cfg.k_refs)
        pf.refs = [others[j] for j in picks]
        bank = MemoryBank(cap_rolling=cfg.cap_rolling)
        for j in pf.refs:
            bank_insert(bank, MemoryEntry(prepared[j].target, 0, True))
        pf.e1 = attend(attn, pf.feats, bank)
        if cfg.use_learner:
            buf = SampleBuffer(max(cfg.cap_buffer, len(others)),
                               [Sample(prepared[j].feats, prepared[j].target, 1.0, True) for j in others])
            res = fit(buf, cfg.train_iters, MappingWeights.zeros(cfg.C, cfg.D, cfg.k_map, cfg.lam))
            pf.fit_trace = res.trace
            pf.e2_raw = apply_mapping(res.weights, pf.feats)
    return prepared


@dataclass
class TrainReport:
    epochs: list[dict]
    fusion_checksum: str
    frozen_checksums: dict
    n_frames: int
    ablation: dict

    def to_dict(self, include_timing: bool = True) -> dict:
        epochs = [dict(e) for e in self.epochs]
        if not include_timing:
            for e in epochs:
                e["wall_time_s"] = None
        return {"epochs": epochs, "fusion_checksum": self.fusion_checksum,
                "frozen_checksums": self.frozen_checksums, "n_frames": self.n_frames,
                "ablation": self.ablation}

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    @property
    def lrs(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    def checksum(self) -> str:
        doc = json.dumps(self.to_dict(include_timing=False), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()


def train_offline(stack: StackParams, attn: AttentionParams, cfg: PipelineConfig,
                  train_set: list[LabeledFrame], tcfg: TrainConfig = TrainConfig(),
                  prepared: list[PreparedFrame] | None = None, log=None):
    """Fit FusionParams on the labelled training frames.

    Returns ``(fusion_params, report)``. Under the ``base`` ablation nothing is
    trainable and the seeded initial parameters are returned with an empty
    loss history per epoch.
    """
    frozen_before = {"stack": stack.checksum(), "attention": attention_checksum(attn)}
    if prepared is None:
        prepared = prepare_training(cfg, stack, attn, train_set)
    fp = init_fusion(cfg.fusion_seed, cfg.C, cfg.D)
    params = fp.arrays()
    opt = AdamW(params, tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay)
    rng = philox(tcfg.seed)
    epochs = []
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        lr = tcfg.lr_at(epoch)
        order = rng.permutation(len(prepared))
        total = 0.0
        for i in order:
            pf = prepared[i]
            if cfg.use_learner:
                loss, grads = frame_loss(cfg, stack, fp, pf.e1, pf.e2_raw, pf.mask, Tape())
                opt.step(params, grads, lr)
            else:
                loss, _ = frame_loss(cfg, stack, fp, pf.e1, None, pf.mask)
            total += loss
        mean_loss = total / len(prepared)
        epochs.append({"epoch": epoch, "loss": mean_loss, "lr": lr,
                       "wall_time_s": time.perf_counter() - t0})
        if log is not None:
            log(f"epoch {epoch:3d}  lr {lr:.1e}  loss {mean_loss:.5f}")
    frozen_after = {"stack": stack.checksum(), "attention": attention_checksum(attn)}
    if frozen_after != frozen_before:
        raise RuntimeError("frozen parameters changed during training")
    report = TrainReport(epochs, fp.checksum(), frozen_after, len(prepared),
                         {"use_learner": cfg.use_learner, "use_afm": cfg.use_afm})
    return fp, report


def save_fusion(fp: FusionParams, model_dir, extra: dict | None = None) -> None:
    d = Path(model_dir) / "fusion"
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in fp.arrays().items():
        write_tensor(d / f"{name}.otns", Tensor(arr))
    doc = {"C": fp.C, "D": fp.D, "params": list(PARAM_NAMES), "checksum": fp.checksum()}
    doc.update(extra or {})
    (d / "fusion.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_fusion(model_dir) -> FusionParams:
    d = Path(model_dir) / "fusion"
    arrays = []
    for name in PARAM_NAMES:
        path = d / f"{name}.otns"
        if not path.exists():
            raise FileNotFoundError(f"missing model file: {path}")
        arrays.append(read_tensor(path).data.copy())
    return FusionParams(*arrays)


def fusion_meta(model_dir) -> dict:
    path = Path(model_dir) / "fusion" / "fusion.json"
    if not path.exists():
        raise FileNotFoundError(f"missing model file: {path}")
    return json.loads(path.read_text())
