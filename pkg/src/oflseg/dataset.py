"""Dataset manifests, PGM masks, reports, and overlay rendering.

Manifest schema (``manifest.json``)::

    {"version": 1, "resolution": [H, W], "classes": [...],
     "sequences": [{"id", "split", "frames": [...], "masks": {class: [...]}}]}

Paths are relative to the manifest's directory. Frames are ``.otns`` tensors
(3×H×W in [0, 1]); masks are binary PGM (P5, maxval 255).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .metrics import boundary
from .tensor.io import read_tensor

MANIFEST_VERSION = 1


def write_pgm(path, img) -> None:
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    a = np.clip(a, 0, 255).astype(np.uint8)
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval, separated by whitespace; '#' comments
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValidationError(f"{path}: 16-bit PGM not supported")
    data = raw[pos:pos + w * h]
    if len(data) != w * h:
        raise ValidationError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def read_mask(path) -> np.ndarray:
    """Binary mask (uint8 0/1), thresholded at 128."""
    return (read_pgm(path) >= 128).astype(np.uint8)


@dataclass
class SequenceRecord:
    id: str
    split: str
    frames: list[str]
    masks: dict[str, list[str]]


@dataclass
class SequenceDataset:
    root: Path
    resolution: tuple[int, int]
    classes: list[str]
    sequences: list[SequenceRecord]
    checksum: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[SequenceRecord]:
        return [s for s in self.sequences if s.split == name]

    def summary(self) -> dict:
        return {"classes": list(self.classes), "resolution": list(self.resolution),
                "n_train": len(self.split("train")), "n_test": len(self.split("test")),
                "n_frames": sum(len(s.frames) for s in self.sequences)}

    def load_images(self, seq: SequenceRecord) -> list[np.ndarray]:
        key = ("img", seq.id)
        if key not in self._cache:
            self._cache[key] = [read_tensor(self.root / f).data for f in seq.frames]
        return self._cache[key]

    def load_masks(self, seq: SequenceRecord, cls: str) -> list[np.ndarray]:
        key = ("mask", seq.id, cls)
        if key not in self._cache:
            self._cache[key] = [read_mask(self.root / f) for f in seq.masks[cls]]
        return self._cache[key]


def load_dataset(manifest_path) -> SequenceDataset:
    """Read and validate a manifest and every file it references."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
        resolution = tuple(int(v) for v in doc["resolution"])
        classes = [str(c) for c in doc["classes"]]
        seqs = [SequenceRecord(str(s["id"]), str(s["split"]), list(s["frames"]),
                               {str(k): list(v) for k, v in s["masks"].items()})
                for s in doc["sequences"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed manifest ({exc})") from exc
    root = path.parent
    h, w = resolution
    for s in seqs:
        if s.split not in ("train", "test"):
            raise ValidationError(f"{path}: sequence {s.id} has unknown split {s.split!r}")
        for f in s.frames:
            fp = root / f
            if not fp.exists():
                raise FileNotFoundError(f"missing frame: {fp}")
            dims = read_tensor(fp).dims
            if dims != (3, h, w):
                raise ValidationError(f"{fp}: resolution {dims} != (3, {h}, {w})")
        for cls in classes:
            if s.split == "train" and cls not in s.masks:
                raise ValidationError(f"{path}: train sequence {s.id} lacks masks for {cls}")
            files = s.masks.get(cls, [])
            if files and len(files) != len(s.frames):
                raise ValidationError(f"{path}: sequence {s.id} class {cls}: "
                                      f"{len(files)} masks for {len(s.frames)} frames")
            for f in files:
                mp = root / f
                if not mp.exists():
                    raise FileNotFoundError(f"missing mask: {mp}")
                if read_pgm(mp).shape != (h, w):
                    raise ValidationError(f"{mp}: mask resolution mismatch")
    return SequenceDataset(root, resolution, classes, seqs, hashlib.sha256(raw).hexdigest())


def save_report(report: dict, path) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def quantize(image) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=0)
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_overlay(image, mask, out_path) -> np.ndarray:
    """Grayscale PGM of ``image`` with the mask boundary drawn in white."""
    g = quantize(image)
    m = np.asarray(mask)
    if m.shape != g.shape:
        raise ValidationError(f"overlay: mask {m.shape} vs image {g.shape}")
    out = g.copy()
    out[boundary(m > 0)] = 255
    write_pgm(out_path, out)
    return out

