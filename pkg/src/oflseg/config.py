"""Configuration records and the structured config-file loader.

Config files are JSON documents with optional ``pipeline``, ``train`` and
``data`` sections. Unknown sections or keys are rejected. Precedence when the
CLI resolves a run: command-line flags > config file > built-in defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class PipelineConfig:
    gamma: float = 0.8
    k_refs: int = 2
    train_iters: int = 10
    infer_iters: int = 5
    binarize_threshold: float = 0.5
    C: int = 32
    D: int = 8
    k_map: int = 3
    lam: float = 0.05
    cap_rolling: int = 6
    cap_buffer: int = 16
    use_learner: bool = True
    use_afm: bool = True
    use_update: bool = True
    reseed_per_frame: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError("binarize_threshold must lie in (0, 1)")
        if self.k_refs < 1:
            raise ConfigError("k_refs must be >= 1")
        if self.train_iters < 0 or self.infer_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.k_map < 1 or self.k_map % 2 == 0:
            raise ConfigError("k_map must be odd")
        if self.lam <= 0:
            raise ConfigError("lam must be > 0")
        if self.C < 4 or self.C % 2 or self.D < 2:
            raise ConfigError("C must be even and >= 4, D >= 2")
        if self.use_afm and not self.use_learner:
            raise ConfigError("use_afm requires use_learner")

    @property
    def stack_seed(self) -> int:
        return self.seed

    @property
    def attention_seed(self) -> int:
        return self.seed + 1

    @property
    def fusion_seed(self) -> int:
        return self.seed + 2

    def ablation(self, name: str) -> "PipelineConfig":
        return replace(self, **ABLATIONS[name])


ABLATIONS = {
    "base": {"use_learner": False, "use_afm": False},
    "learner": {"use_learner": True, "use_afm": False},
    "full": {"use_learner": True, "use_afm": True},
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr0: float = 1e-3
    milestones: tuple[int, ...] = (10, 30)
    decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch number."""
        n = sum(epoch > m for m in self.milestones)
        return self.lr0 * self.decay ** n


@dataclass(frozen=True)
class GenParams:
    seed: int = 42
    n_sequences: int = 12
    frames_per_sequence: int = 8
    size: int = 64
    radius_range: tuple[float, float] = (7.0, 11.0)
    n_distractors: int = 3
    distractor_similarity: float = 0.08
    blur_sigma: float = 1.0
    drift: float = 1.5
    noise_sigma: float = 0.03
    n_train: int = 2
    train_frames_per_sequence: int | None = None

    def __post_init__(self):
        if self.train_frames_per_sequence is not None and self.train_frames_per_sequence < 1:
            raise ConfigError("train_frames_per_sequence must be >= 1")
        if self.size % 4:
            raise ConfigError("image size must be divisible by 4")
        if self.n_distractors < 0:
            raise ConfigError("n_distractors must be >= 0")
        if self.n_sequences < 1 or self.frames_per_sequence < 1:
            raise ConfigError("need at least one sequence and one frame")
        if not 0 <= self.n_train <= self.n_sequences:
            raise ConfigError("n_train must lie in [0, n_sequences]")
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))


# Ablation benchmark: 2 long labelled training sequences give offline fusion
# training enough optimizer steps; the 10 query sequences stay at 8 frames.
BENCHMARK_DATA = GenParams(train_frames_per_sequence=64)


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GenParams = field(default_factory=GenParams)

    def to_dict(self) -> dict:
        return {"pipeline": asdict(self.pipeline), "train": _listify(asdict(self.train)),
                "data": _listify(asdict(self.data))}


def _listify(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_SECTIONS = {"pipeline": PipelineConfig, "train": TrainConfig, "data": GenParams}


def build_section(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return cls(**values)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be an object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    parts = {name: build_section(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)
