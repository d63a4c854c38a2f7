"""64-bit finite-difference checks for the differentiable primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import diffcore as dc

F64 = torch.float64
FD_STEP = 1e-3  # five-point stencil: truncation O(h^4), roundoff O(eps/h)
MIN_MAGNITUDE = 1e-6


def naive_conv2d(x: np.ndarray, k: np.ndarray, b: np.ndarray | None, stride: int, pad: int) -> np.ndarray:
    """Direct cross-correlation with explicit loops; reference for ``conv2d``."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                y = r * stride + u - pad
                                z = s * stride + v - pad
                                if 0 <= y < h and 0 <= z < w:
                                    acc += x[i, ic, y, z] * k[oc, ic, u, v]
                    out[i, oc, r, s] = acc
    return out


def _away(t: torch.Tensor, points, margin: float = 5e-3) -> torch.Tensor:
    """Push entries within ``margin`` of any kink point out of that neighbourhood.

    The margin exceeds the stencil reach ``2 * FD_STEP`` so no difference straddles a kink.
    """
    for p in points:
        close = (t - p).abs() < margin
        t = torch.where(close, p + torch.sign(t - p + 1e-12) * 2 * margin, t)
    return t


def _randn(g, *shape):
    return torch.randn(tuple(shape), generator=g, dtype=F64)


def _conv_case(g):
    n, c, o = [int(v) for v in torch.randint(1, 4, (3,), generator=g)]
    h = int(torch.randint(4, 8, (1,), generator=g))
    k = int(torch.randint(1, 4, (1,), generator=g))
    stride = int(torch.randint(1, 3, (1,), generator=g))
    pad = int(torch.randint(0, 2, (1,), generator=g))
    return (lambda x, w, b: dc.conv2d(x, w, b, stride, pad)), [_randn(g, n, c, h, h), _randn(g, o, c, k, k),
                                                              _randn(g, o)]


def _ce_case(g):
    n, k = 4, 5
    labels = torch.randint(0, k, (n,), generator=g)
    return (lambda z: dc.softmax_cross_entropy(z, labels)), [_randn(g, n, k) * 2]


PRIMITIVE_CASES = {
    "conv2d": _conv_case,
    "matmul": lambda g: (dc.matmul, [_randn(g, 3, 4), _randn(g, 4, 2)]),
    "linear": lambda g: (dc.linear, [_randn(g, 3, 4), _randn(g, 5, 4), _randn(g, 5)]),
    "relu": lambda g: (dc.relu, [_away(_randn(g, 4, 5), [0.0])]),
    "tanh": lambda g: (dc.tanh, [_randn(g, 4, 5)]),
    "clamp_st": lambda g: ((lambda x: dc.clamp_st(x, -0.5, 0.7)), [_away(_randn(g, 4, 5), [-0.5, 0.7])]),
    "add": lambda g: ((lambda a, b: a + b), [_randn(g, 3, 4), _randn(g, 3, 4)]),
    "sub": lambda g: ((lambda a, b: a - b), [_randn(g, 3, 4), _randn(g, 3, 4)]),
    "mul": lambda g: ((lambda a, b: a * b), [_randn(g, 3, 4), _randn(g, 3, 4)]),
    "div": lambda g: ((lambda a, b: a / b), [_randn(g, 3, 4), _randn(g, 3, 4).abs() + 0.5]),
    "sum": lambda g: ((lambda a: a.sum(dim=1)), [_randn(g, 3, 4)]),
    "mean": lambda g: ((lambda a: a.mean(dim=0)), [_randn(g, 3, 4)]),
    "upsample_nearest2x": lambda g: (dc.upsample_nearest2x, [_randn(g, 2, 2, 3, 3)]),
    "global_avg_pool": lambda g: (dc.global_avg_pool, [_randn(g, 2, 3, 4, 4)]),
    "l2_norm": lambda g: ((lambda a: dc.l2_norm(a, 1)), [_randn(g, 3, 5)]),
    "cosine_similarity": lambda g: ((lambda a, b: dc.cosine_similarity(a, b, 1)), [_randn(g, 3, 5), _randn(g, 3, 5)]),
    "normalize_rows": lambda g: (dc.normalize_rows, [_randn(g, 3, 5)]),
    "softmax": lambda g: (dc.softmax, [_randn(g, 3, 5)]),
    "log_softmax": lambda g: (dc.log_softmax, [_randn(g, 3, 5)]),
    "softmax_cross_entropy": _ce_case,
}


@torch.no_grad()
def _five_point(scalar, inputs, idx: int, j: int) -> float:
    vals = []
    for k in (2, 1, -1, -2):
        shifted = [t.clone() for t in inputs]
        shifted[idx].view(-1)[j] += k * FD_STEP
        vals.append(scalar(*shifted).item())
    return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * FD_STEP)


@dataclass
class GradCheckReport:
    name: str
    cases: int
    entries: int
    max_rel_err: float


def finite_difference_check(name: str, cases: int = 20, seed: int = 0) -> GradCheckReport:
    """Compare autodiff gradients with five-point differences on ``cases`` random instances.

    The scalar probed is ``sum(weights * op(inputs))`` with random weights, so
    every output entry contributes. Relative error is measured on gradient
    entries of magnitude at least ``MIN_MAGNITUDE``.
    """
    build = PRIMITIVE_CASES[name]
    g = torch.Generator().manual_seed(seed)
    worst, entries = 0.0, 0
    for _ in range(cases):
        fn, inputs = build(g)
        out_shape = fn(*inputs).shape
        weights = _randn(g, *out_shape)

        def scalar(*xs):
            return (fn(*xs) * weights).sum()

        leaves = [x.clone().requires_grad_(True) for x in inputs]
        analytic = dc.backward(scalar(*leaves), leaves)
        for idx, x in enumerate(inputs):
            flat = x.reshape(-1)
            for j in range(flat.numel()):
                numeric = _five_point(scalar, inputs, idx, j)
                a = analytic[idx].reshape(-1)[j].item()
                scale = max(abs(a), abs(numeric))
                if scale < MIN_MAGNITUDE:
                    continue
                entries += 1
                worst = max(worst, abs(a - numeric) / scale)
    return GradCheckReport(name, cases, entries, worst)
