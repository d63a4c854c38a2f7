"""Fixed small architectures and deterministic SplitMix64 initialisation.

Parameters live in ``ModelParams``: an architecture descriptor plus an ordered
name -> tensor mapping. Forward functions are pure in the parameters, so the
same code serves training (leaves with ``requires_grad``), frozen evaluation
and gradient checks in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffcore as dc
from .rng import SplitMix64, unit_float

FEATURE_DIM = 128
PROJECTION_DIM = 64

# (name, out, in, kernel, stride) ; padding is 1 for every 3x3 conv
ENCODER_LAYERS = (
    ("conv1", 32, 3, 3, 1),
    ("conv2", 64, 32, 3, 2),
    ("conv3", 128, 64, 3, 2),
    ("conv4", 128, 128, 3, 2),
)
GENERATOR_LAYERS = (
    ("conv1", 32, 3, 3, 1),
    ("conv2", 64, 32, 3, 2),
    ("conv3", 64, 64, 3, 1),
    ("conv4", 32, 64, 3, 1),  # applied after the nearest x2 upsample
    ("conv5", 3, 32, 3, 1),
)
PROJECTION_LAYERS = (("fc1", 128, 128), ("fc2", PROJECTION_DIM, 128))


@dataclass
class ModelParams:
    arch: dict
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def detached(self) -> "ModelParams":
        return ModelParams(dict(self.arch), {k: v.detach() for k, v in self.tensors.items()})

    def trainable(self) -> "ModelParams":
        return ModelParams(dict(self.arch), {k: v.detach().clone().requires_grad_(True)
                                             for k, v in self.tensors.items()})

    def with_tensors(self, tensors: dict) -> "ModelParams":
        return ModelParams(dict(self.arch), dict(tensors))

    def to(self, dtype) -> "ModelParams":
        return ModelParams(dict(self.arch), {k: v.to(dtype) for k, v in self.tensors.items()})


def layer_shapes(arch: dict) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in the documented initialisation order."""
    kind = arch.get("kind")
    if kind in ("encoder", "generator"):
        layers = ENCODER_LAYERS if kind == "encoder" else GENERATOR_LAYERS
        out = []
        for name, o, c, k, _ in layers:
            out += [(f"{name}.weight", (o, c, k, k)), (f"{name}.bias", (o,))]
        return out
    if kind == "projection":
        out = []
        for name, o, i in PROJECTION_LAYERS:
            out += [(f"{name}.weight", (o, i)), (f"{name}.bias", (o,))]
        return out
    if kind == "head":
        k = int(arch.get("num_classes", 0))
        if k < 2:
            raise ValueError(f"head needs num_classes >= 2, got {k}")
        d = int(arch.get("in_dim", FEATURE_DIM))
        return [("fc.weight", (k, d)), ("fc.bias", (k,))]
    raise ValueError(f"unknown architecture descriptor: {arch!r}")


def init_params(arch: dict, seed: int) -> ModelParams:
    """Kaiming-uniform fan-in weights (bound sqrt(6/fan_in)) and zero biases.

    Weights are drawn layer by layer, each in row-major order, from one
    SplitMix64(seed) stream. Biases consume no draws.
    """
    rng = SplitMix64(seed)
    tensors = {}
    for name, shape in layer_shapes(arch):
        if name.endswith(".bias"):
            tensors[name] = torch.zeros(shape, dtype=dc.TRAIN_DTYPE)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        u = unit_float(rng.take(int(np.prod(shape))))
        tensors[name] = torch.from_numpy(((2.0 * u - 1.0) * bound).astype(np.float32).reshape(shape))
    return ModelParams(dict(arch), tensors)


def param_count_formula(arch: dict) -> int:
    return sum(int(np.prod(s)) for _, s in layer_shapes(arch))


def _conv(p: ModelParams, name: str, x, stride: int):
    return dc.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, pad=1)


def _fast(x: torch.Tensor) -> torch.Tensor:
    # channels_last is markedly faster for these convs on CPU
    return x.contiguous(memory_format=torch.channels_last) if x.dtype == torch.float32 else x


def encoder_forward(params: ModelParams, images: torch.Tensor) -> torch.Tensor:
    if images.dim() != 4 or tuple(images.shape[1:]) != (3, 32, 32):
        raise dc.ShapeError(f"encoder expects [N,3,32,32], got {tuple(images.shape)}")
    h = _fast(images)
    for name, _, _, _, stride in ENCODER_LAYERS:
        h = dc.relu(_conv(params, name, h, stride))
    return dc.global_avg_pool(h)


def generator_forward(params: ModelParams, images: torch.Tensor, eps: float) -> torch.Tensor:
    """Raw generator output ``eps * tanh(...)``, same shape as ``images``."""
    if eps <= 0:
        raise ValueError(f"generator epsilon must be positive, got {eps}")
    if images.dim() != 4 or images.shape[1] != 3:
        raise dc.ShapeError(f"generator expects [N,3,H,W], got {tuple(images.shape)}")
    h = _fast(images)
    h = dc.relu(_conv(params, "conv1", h, 1))
    h = dc.relu(_conv(params, "conv2", h, 2))
    h = dc.relu(_conv(params, "conv3", h, 1))
    h = dc.upsample_nearest2x(h)
    h = dc.relu(_conv(params, "conv4", h, 1))
    h = _conv(params, "conv5", h, 1)
    return (eps * dc.tanh(h)).contiguous()


def projection_forward(params: ModelParams, features: torch.Tensor) -> torch.Tensor:
    h = dc.relu(dc.linear(features, params["fc1.weight"], params["fc1.bias"]))
    return dc.linear(h, params["fc2.weight"], params["fc2.bias"])


def head_forward(params: ModelParams, features: torch.Tensor) -> torch.Tensor:
    w = params["fc.weight"]
    if features.dim() != 2 or features.shape[1] != w.shape[1]:
        raise dc.ShapeError(f"head expects [N,{w.shape[1]}] features, got {tuple(features.shape)}")
    return dc.linear(features, w, params["fc.bias"])


def predict(head: ModelParams, features: torch.Tensor) -> torch.Tensor:
    return dc.argmax_rows(head_forward(head, features))


@torch.no_grad()
def encode(encoder: ModelParams, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    """Frozen-encoder features for a whole image tensor, in index order."""
    enc = encoder.detached()
    chunks = [encoder_forward(enc, images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(chunks)


ENCODER_ARCH = {"kind": "encoder"}
GENERATOR_ARCH = {"kind": "generator"}
PROJECTION_ARCH = {"kind": "projection"}


def head_arch(num_classes: int) -> dict:
    return {"kind": "head", "num_classes": int(num_classes), "in_dim": FEATURE_DIM}
