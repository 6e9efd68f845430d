"""Synthetic image sequences with a drifting target and adjacent distractors.

Each sequence holds one bright elliptical target on a dim shaded background.
Distractor ellipses sit against the target boundary with an intensity only
``distractor_similarity`` away from the target's, so intensity alone barely
separates them. Frames are blurred, corrupted with Gaussian noise, and
replicated to three channels.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import GenParams
from .dataset import SequenceDataset, load_dataset, write_pgm
from .frozen import philox
from .tensor import Tensor
from .tensor.io import write_tensor

CLASS_NAME = "target"
BACKGROUND = 0.25
TARGET_LEVEL = 0.65
_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


def ellipse(size: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _sequence(gp: GenParams, rng: np.random.Generator, n_frames: int):
    n = gp.size
    rmin, rmax = gp.radius_range
    ry, rx = rng.uniform(rmin, rmax, size=2)
    angle = rng.uniform(0, math.pi)
    margin = rmax + 3
    cy, cx = rng.uniform(margin, n - margin, size=2)
    level = TARGET_LEVEL + rng.uniform(-0.02, 0.02)
    grad = rng.uniform(-0.05, 0.05, size=2)
    distractors = []
    for _ in range(gp.n_distractors):
        theta = rng.uniform(0, 2 * math.pi)
        dr = rng.uniform(0.45, 0.8) * rmin
        gap = rng.uniform(0.6, 1.0) * gp.distractor_similarity
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        distractors.append({"theta": theta, "r": dr, "level": level + sign * gap,
                            "aspect": rng.uniform(0.7, 1.3)})
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n - 0.5
    shade = BACKGROUND + grad[0] * yy + grad[1] * xx

    frames, masks = [], []
    vy, vx = rng.normal(0, gp.drift, size=2)
    for _ in range(n_frames):
        img = shade.copy()
        target_r = 0.5 * (ry + rx)
        for d in distractors:
            d["theta"] += rng.normal(0, 0.05)
            dist = target_r + d["r"] * 0.9
            dy = cy + dist * math.sin(d["theta"])
            dx = cx + dist * math.cos(d["theta"])
            img[ellipse(n, dy, dx, d["r"] * d["aspect"], d["r"] / d["aspect"], angle)] = d["level"]
        mask = ellipse(n, cy, cx, ry, rx, angle)
        img[mask] = level
        if gp.blur_sigma > 0:
            img = ndimage.gaussian_filter(img, gp.blur_sigma, mode="nearest")
        img = img + rng.normal(0, gp.noise_sigma, size=img.shape)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        labels, count = ndimage.label(mask, structure=_FOUR_CONN)
        if count != 1:
            raise AssertionError("generated target mask is not a single 4-connected component")
        frames.append(np.repeat(img[None], 3, axis=0))
        masks.append(mask.astype(np.uint8))
        # smooth drift and deformation
        vy = 0.7 * vy + rng.normal(0, gp.drift * 0.5)
        vx = 0.7 * vx + rng.normal(0, gp.drift * 0.5)
        cy = float(np.clip(cy + vy, margin, n - margin))
        cx = float(np.clip(cx + vx, margin, n - margin))
        ry = float(np.clip(ry * math.exp(rng.normal(0, 0.03)), rmin, rmax))
        rx = float(np.clip(rx * math.exp(rng.normal(0, 0.03)), rmin, rmax))
        angle += rng.normal(0, 0.05)
    return frames, masks


def gen_synthetic(gp: GenParams, out_dir) -> SequenceDataset:
    """Write a dataset (frames, masks, manifest) fully determined by ``gp``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = philox(gp.seed)
    seqs = []
    for s in range(gp.n_sequences):
        sid = f"seq{s:03d}"
        is_train = s < gp.n_train
        n_frames = gp.frames_per_sequence
        if is_train and gp.train_frames_per_sequence is not None:
            n_frames = gp.train_frames_per_sequence
        frames, masks = _sequence(gp, rng, n_frames)
        frame_files, mask_files = [], []
        for i, (img, m) in enumerate(zip(frames, masks)):
            f = f"{sid}/frame_{i:03d}.otns"
            mf = f"{sid}/{CLASS_NAME}_{i:03d}.pgm"
            (out / sid).mkdir(exist_ok=True)
            write_tensor(out / f, Tensor(img))
            write_pgm(out / mf, m * 255)
            frame_files.append(f)
            mask_files.append(mf)
        seqs.append({"id": sid, "split": "train" if is_train else "test",
                     "frames": frame_files, "masks": {CLASS_NAME: mask_files}})
    manifest = {"version": 1, "resolution": [gp.size, gp.size], "classes": [CLASS_NAME],
                "sequences": seqs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return load_dataset(out / "manifest.json")
