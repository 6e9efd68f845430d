"""Seeded toy networks standing in for the frozen segmentation backbone.

Three pure functions over an immutable :class:`StackParams`:

* ``encode_image``: 3×H×W image -> C×H/4×W/4 generic features
* ``encode_memory``: (features, mask probability) -> D×H/4×W/4 memory feature
* ``decode_mask``: C×H/4×W/4 fused features -> H×W probability map

Weights are drawn from Kaiming-uniform ``U(-a, a)``, ``a = sqrt(6 / fan_in)``,
using numpy's Philox4x64 counter-based generator keyed directly by the seed,
so fixtures are platform-stable. Biases start at zero.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, conv2d, no_tape, relu, reshape, sigmoid, upsample_nearest
from .tensor.io import read_tensor, to_bytes, write_tensor
from .tensor.ops import avg_pool2, conv2d_raw

DOWNSAMPLE = 4
# pooled mask enters the memory encoder amplified so it is not drowned out by
# the C feature channels
MASK_GAIN = 40.0


def philox(seed: int) -> np.random.Generator:
    """Counter-based generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    a = np.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(np.float32)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.flags.writeable = False
    return arr


def params_checksum(layers: dict[str, np.ndarray]) -> str:
    """sha256 over the OTNS serialization of every layer, in key order."""
    h = hashlib.sha256()
    for name, arr in layers.items():
        h.update(name.encode())
        h.update(to_bytes(Tensor(arr)))
    return h.hexdigest()


@dataclass(frozen=True)
class StackParams:
    seed: int
    C: int
    D: int
    kernel: int
    layers: dict[str, np.ndarray] = field(repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layers[name]

    def checksum(self) -> str:
        return params_checksum(self.layers)


def layer_shapes(C: int, D: int, k: int = 3) -> dict[str, tuple[int, ...]]:
    h = C // 2
    return {
        "enc1.w": (h, 3, k, k), "enc1.b": (h,),
        "enc2.w": (C, h, k, k), "enc2.b": (C,),
        "mem1.w": (C, C + 1, k, k), "mem1.b": (C,),
        "mem2.w": (D, C, 1, 1), "mem2.b": (D,),
        "dec1.w": (h, C, k, k), "dec1.b": (h,),
        "dec2.w": (1, h, k, k), "dec2.b": (1,),
    }


def init_stack(seed: int, C: int, D: int, kernel: int = 3) -> StackParams:
    if C < 4 or C % 2:
        raise ConfigError(f"C must be even and >= 4, got {C}")
    if D < 2:
        raise ConfigError(f"D must be >= 2, got {D}")
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"kernel must be odd, got {kernel}")
    rng = philox(seed)
    layers = {}
    for name, shape in layer_shapes(C, D, kernel).items():
        if name.endswith(".b"):
            layers[name] = _freeze(np.zeros(shape, dtype=np.float32))
        else:
            layers[name] = _freeze(kaiming_uniform(rng, shape))
    return StackParams(seed=int(seed), C=C, D=D, kernel=kernel, layers=layers)


def with_layers(params: StackParams, **overrides: np.ndarray) -> StackParams:
    """Copy of ``params`` with some layers replaced (test hook)."""
    layers = dict(params.layers)
    for key, arr in overrides.items():
        name = key.replace("__", ".")
        if name not in layers or layers[name].shape != np.shape(arr):
            raise ShapeError(f"override {name}: bad name or shape")
        layers[name] = _freeze(np.array(arr, dtype=np.float32))
    return StackParams(params.seed, params.C, params.D, params.kernel, layers)


def encode_image(params: StackParams, image) -> Tensor:
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"image must be 3×H×W, got {img.shape}")
    if img.shape[1] % DOWNSAMPLE or img.shape[2] % DOWNSAMPLE:
        raise ShapeError(f"image H, W must be multiples of {DOWNSAMPLE}, got {img.shape[1:]}")
    x = np.maximum(conv2d_raw(img, params["enc1.w"], params["enc1.b"]), 0.0)
    x = avg_pool2(x)
    x = np.maximum(conv2d_raw(x, params["enc2.w"], params["enc2.b"]), 0.0)
    return Tensor(avg_pool2(x))


def pool_mask(mask_prob: np.ndarray, factor: int = DOWNSAMPLE) -> np.ndarray:
    h, w = mask_prob.shape
    return mask_prob.reshape(h // factor, factor, w // factor, factor).mean(
        axis=(1, 3), dtype=np.float64).astype(np.float32)


def encode_memory(params: StackParams, feats: Tensor, mask_prob) -> Tensor:
    f = feats.data
    m = np.asarray(mask_prob.data if isinstance(mask_prob, Tensor) else mask_prob, dtype=np.float32)
    if f.ndim != 3 or f.shape[0] != params.C:
        raise ShapeError(f"features must be {params.C}×H'×W', got {f.shape}")
    if m.shape != (f.shape[1] * DOWNSAMPLE, f.shape[2] * DOWNSAMPLE):
        raise ShapeError(f"mask {m.shape} inconsistent with features {f.shape}")
    pooled = pool_mask(m)[None] * np.float32(MASK_GAIN)
    x = np.concatenate([f, pooled], axis=0)
    x = np.maximum(conv2d_raw(x, params["mem1.w"], params["mem1.b"]), 0.0)
    return Tensor(conv2d_raw(x, params["mem2.w"], params["mem2.b"]))


def decode_mask(params: StackParams, fused: Tensor, taped: bool = False) -> Tensor:
    """Probability map H×W. With ``taped``, the tape tracks activations so
    gradients reach ``fused``; the decoder weights are never watched."""
    if len(fused.dims) != 3 or fused.dims[0] != params.C:
        raise ShapeError(f"decoder input must be {params.C}×H'×W', got {fused.dims}")

    def run():
        w1, b1 = Tensor(params["dec1.w"]), Tensor(params["dec1.b"])
        w2, b2 = Tensor(params["dec2.w"]), Tensor(params["dec2.b"])
        x = relu(conv2d(fused, w1, b1))
        x = conv2d(x, w2, b2)
        x = upsample_nearest(upsample_nearest(x, 2), 2)
        p = sigmoid(x)
        return reshape(p, p.dims[1], p.dims[2])

    if taped:
        return run()
    with no_tape():
        return run()


def save_stack(params: StackParams, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in params.layers.items():
        write_tensor(d / f"{name}.otns", Tensor(arr))
    manifest = {"seed": params.seed, "C": params.C, "D": params.D, "kernel": params.kernel,
                "layers": [{"name": n, "dims": list(a.shape)} for n, a in params.layers.items()]}
    (d / "stack.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_stack(directory) -> StackParams:
    d = Path(directory)
    manifest = json.loads((d / "stack.json").read_text())
    layers = {}
    for entry in manifest["layers"]:
        path = d / f"{entry['name']}.otns"
        if not path.exists():
            raise FileNotFoundError(os.fspath(path))
        layers[entry["name"]] = _freeze(read_tensor(path).data)
    return StackParams(manifest["seed"], manifest["C"], manifest["D"], manifest["kernel"], layers)
