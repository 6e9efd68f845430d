"""Sequence-level orchestration: seeding, per-frame inference, gated updates."""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import PipelineConfig
from .dataset import save_report, write_pgm
from .errors import ConfigError, StateError
from .frozen import StackParams, decode_mask, encode_image, encode_memory, init_stack
from .fusion import FusionParams, fused_features, init_fusion
from .learner import MappingWeights, Sample, SampleBuffer, apply_mapping, fit, online_refine
from .memory import (
    AttentionParams, MemoryBank, MemoryEntry, attend, bank_insert, init_attention,
    select_references,
)
from .metrics import avg_hausdorff, dice
from .tensor import Tensor


@dataclass(frozen=True)
class Components:
    stack: StackParams
    attn: AttentionParams
    fusion: FusionParams | None


def build_components(cfg: PipelineConfig, fusion: FusionParams | None = None) -> Components:
    stack = init_stack(cfg.stack_seed, cfg.C, cfg.D)
    attn = init_attention(cfg.attention_seed, cfg.C, cfg.D)
    if fusion is None and cfg.use_learner:
        fusion = init_fusion(cfg.fusion_seed, cfg.C, cfg.D)
    return Components(stack, attn, fusion)


@dataclass
class TrainingPool:
    """Encoded labelled frames for one class: features and memory targets."""
    feats: list[Tensor]
    targets: list[Tensor]

    def __len__(self):
        return len(self.feats)


def encode_training(stack: StackParams, images, masks) -> TrainingPool:
    feats = [encode_image(stack, img) for img in images]
    targets = [encode_memory(stack, f, m) for f, m in zip(feats, masks)]
    return TrainingPool(feats, targets)


@dataclass
class PipelineState:
    bank: MemoryBank
    tau: MappingWeights | None
    buffer: SampleBuffer | None
    frame_index: int = 0
    init_trace: list[float] = field(default_factory=list)

    def checksum(self) -> str:
        """Digest of the online state (bank, tau, buffer); the frame counter is excluded."""
        h = hashlib.sha256()
        for e in self.bank.entries():
            h.update(e.memory.data.tobytes())
            h.update(f"{e.temporal_pos}:{int(e.pinned)}".encode())
        if self.tau is not None:
            h.update(self.tau.checksum().encode())
        if self.buffer is not None:
            h.update(self.buffer.checksum().encode())
        return h.hexdigest()


@dataclass
class MaskPrediction:
    prob: np.ndarray
    binary: np.ndarray
    confidence: float
    accepted: bool


def confidence(prob, threshold: float = 0.5) -> float:
    """Mean probability over pixels predicted as foreground; 0 if there are none."""
    p = np.asarray(prob, dtype=np.float64)
    fg = p > threshold
    n = int(fg.sum())
    if n == 0:
        return 0.0
    return float(p[fg].sum() / n)


def _seed_bank(cfg: PipelineConfig, pool: TrainingPool, fq: Tensor, bank: MemoryBank) -> list[int]:
    refs = select_references(fq, pool.feats, cfg.k_refs)
    bank.pinned.clear()
    for j in refs:
        bank_insert(bank, MemoryEntry(pool.targets[j], 0, True))
    return refs


def init_sequence(cfg: PipelineConfig, comps: Components, pool: TrainingPool,
                  first_query_feats: Tensor) -> PipelineState:
    if len(pool) == 0:
        raise ConfigError("pipeline needs a non-empty training set")
    bank = MemoryBank(cap_rolling=cfg.cap_rolling)
    _seed_bank(cfg, pool, first_query_feats, bank)
    tau = buf = None
    trace = []
    if cfg.use_learner:
        seeds = [Sample(f, m, 1.0, True) for f, m in zip(pool.feats, pool.targets)]
        buf = SampleBuffer(cfg.cap_buffer, seeds)
        res = fit(buf, cfg.train_iters, MappingWeights.zeros(cfg.C, cfg.D, cfg.k_map, cfg.lam))
        tau, trace = res.weights, res.trace
    return PipelineState(bank, tau, buf, 0, trace)


def infer_frame(cfg: PipelineConfig, state: PipelineState | None, comps: Components, image,
                pool: TrainingPool | None = None) -> MaskPrediction:
    """Segment one frame and apply the confidence-gated update to ``state``."""
    if state is None or not state.bank.pinned:
        raise StateError("pipeline state is not initialised; call init_sequence first")
    fq = encode_image(comps.stack, image)
    if cfg.reseed_per_frame and pool is not None and state.frame_index > 0:
        _seed_bank(cfg, pool, fq, state.bank)
    e1 = attend(comps.attn, fq, state.bank)
    e2_raw = apply_mapping(state.tau, fq) if cfg.use_learner else None
    e_tar = fused_features(cfg, comps.fusion, e1, e2_raw)
    prob = decode_mask(comps.stack, e_tar).data
    conf = confidence(prob, cfg.binarize_threshold)
    binary = (prob > cfg.binarize_threshold).astype(np.uint8)
    # without the update strategy every prediction is stored
    accepted = conf > cfg.gamma if cfg.use_update else True
    if accepted:
        m = encode_memory(comps.stack, fq, prob)
        bank_insert(state.bank, MemoryEntry(m, state.frame_index, False))
        if cfg.use_learner:
            state.tau, state.buffer = online_refine(state.tau, state.buffer, Sample(fq, m, 1.0, False),
                                                    cfg.infer_iters)
    state.frame_index += 1
    return MaskPrediction(prob, binary, conf, bool(accepted))


def run_sequence(cfg: PipelineConfig, comps: Components, pool: TrainingPool, images,
                 return_state: bool = False):
    images = list(images)
    if not images:
        raise ConfigError("a query sequence needs at least one frame")
    fq0 = encode_image(comps.stack, images[0])
    state = init_sequence(cfg, comps, pool, fq0)
    preds = [infer_frame(cfg, state, comps, img, pool) for img in images]
    return (preds, state) if return_state else preds


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("OFL_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(cfg: PipelineConfig, dataset, comps: Components, report_path=None,
                   pred_dir=None, extra: dict | None = None, timing: bool = True) -> dict:
    """Evaluate every (test sequence, class) pair and aggregate scores.

    Returns the report dict; writes it as JSON when ``report_path`` is given
    and binary masks as PGM files under ``pred_dir`` when given. With
    ``timing=False`` the ``runtime_s`` field is null so reruns are byte-identical.
    """
    t0 = time.perf_counter()
    train = dataset.split("train")
    test = dataset.split("test")
    if not train:
        raise ConfigError("dataset has no train split")
    if not test:
        raise ConfigError("dataset has no test split")

    pools = {}
    for cls in dataset.classes:
        images, masks = [], []
        for seq in train:
            images += dataset.load_images(seq)
            masks += dataset.load_masks(seq, cls)
        pools[cls] = encode_training(comps.stack, images, masks)

    jobs = [(seq, cls) for cls in dataset.classes for seq in test]

    def run_job(job):
        seq, cls = job
        images = dataset.load_images(seq)
        gts = dataset.load_masks(seq, cls)
        preds = run_sequence(cfg, comps, pools[cls], images)
        dices = [dice(p.binary, g) for p, g in zip(preds, gts)]
        ahds = [avg_hausdorff(p.binary, g) for p, g in zip(preds, gts)]
        return preds, {
            "sequence": seq.id, "dice": float(np.mean(dices)), "ahd": float(np.mean(ahds)),
            "frame_dice": dices, "frame_ahd": ahds,
            "confidence": [p.confidence for p in preds],
            "accepted": [p.accepted for p in preds],
        }

    with ThreadPoolExecutor(max_workers=_threads()) as pool_exec:
        results = list(pool_exec.map(run_job, jobs))

    per_class = []
    for cls in dataset.classes:
        rows = [r for (seq, c), (_, r) in zip(jobs, results) if c == cls]
        per_class.append({"class": cls, "mean_dice": float(np.mean([r["dice"] for r in rows])),
                          "mean_ahd": float(np.mean([r["ahd"] for r in rows])),
                          "per_sequence": rows})
    if pred_dir is not None:
        for (seq, cls), (preds, _) in zip(jobs, results):
            for i, p in enumerate(preds):
                write_pgm(os.path.join(pred_dir, seq.id, cls, f"{i:04d}.pgm"), p.binary * 255)

    report = {
        "config": asdict(cfg),
        "dataset_id": dataset.checksum,
        "per_class": per_class,
        "overall": {"mean_dice": float(np.mean([c["mean_dice"] for c in per_class])),
                    "mean_ahd": float(np.mean([c["mean_ahd"] for c in per_class]))},
        "runtime_s": time.perf_counter() - t0 if timing else None,
    }
    if extra:
        report.update(extra)
    if report_path is not None:
        save_report(report, report_path)
    return report
