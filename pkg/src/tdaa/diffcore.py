"""Differentiable primitives, reverse-mode gradients and the Adam update.

Tensors are ``torch.Tensor`` values and gradients come from torch's
reverse-mode engine. This module pins the conventions the rest of the package
relies on: shape checks with named axes, finite-value enforcement, the
straight-through clamp subgradient, deterministic kernels, and a hand-written
Adam whose state is explicit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F

torch.use_deterministic_algorithms(True)

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where only finite values are allowed."""


def configure_threads() -> int:
    """Apply ``TDAA_THREADS`` (default: all cores) to torch's intra-op pool."""
    cores = os.cpu_count() or 1
    want = os.environ.get("TDAA_THREADS")
    n = cores if not want else max(1, min(int(want), cores))
    torch.set_num_threads(n)
    return n


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        bad = int((~torch.isfinite(t)).sum())
        raise NonFiniteError(f"{what}: {bad} non-finite element(s)")
    return t


def tensor(data, dtype: torch.dtype = TRAIN_DTYPE) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype)
    return check_finite(t, "tensor()")


def _need_rank(t: torch.Tensor, rank: int, name: str, axes: str) -> None:
    if t.dim() != rank:
        raise ShapeError(f"{name}: expected rank {rank} [{axes}], got shape {tuple(t.shape)}")


# ---------------------------------------------------------------- primitives


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, pad: int = 0) -> torch.Tensor:
    """Direct 2-D cross-correlation with zero padding, NCHW layout."""
    _need_rank(x, 4, "conv2d input", "N,C,H,W")
    _need_rank(kernel, 4, "conv2d kernel", "O,C,kh,kw")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d: input channel axis C={x.shape[1]} != kernel channel axis C={kernel.shape[1]}")
    if bias is not None and (bias.dim() != 1 or bias.shape[0] != kernel.shape[0]):
        raise ShapeError(
            f"conv2d: bias axis O={tuple(bias.shape)} != kernel output axis O={kernel.shape[0]}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    kh, kw = kernel.shape[2:]
    if kh > x.shape[2] + 2 * pad:
        raise ShapeError(f"conv2d: kernel height kh={kh} exceeds padded H={x.shape[2] + 2 * pad}")
    if kw > x.shape[3] + 2 * pad:
        raise ShapeError(f"conv2d: kernel width kw={kw} exceeds padded W={x.shape[3] + 2 * pad}")
    return F.conv2d(x, kernel, bias, stride=stride, padding=pad)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _need_rank(a, 2, "matmul lhs", "N,K")
    _need_rank(b, 2, "matmul rhs", "K,M")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner axes differ, lhs K={a.shape[1]} rhs K={b.shape[0]}")
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with weight stored as ``[out, in]``."""
    _need_rank(x, 2, "linear input", "N,in")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input feature axis {x.shape[1]} != weight in-axis {weight.shape[1]}")
    return F.linear(x, weight, bias)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


class _ClampST(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lo, hi):
        inside = (x > lo) & (x < hi)
        ctx.save_for_backward(inside)
        return x.clamp(lo, hi)

    @staticmethod
    def backward(ctx, grad):
        (inside,) = ctx.saved_tensors
        return grad * inside.to(grad.dtype), None, None


def clamp_st(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    """Elementwise clamp; gradient 1 strictly inside ``(lo, hi)`` and 0 elsewhere."""
    if not lo < hi:
        raise ValueError(f"clamp_st: need lo < hi, got lo={lo} hi={hi}")
    return _ClampST.apply(x, float(lo), float(hi))


def upsample_nearest2x(x: torch.Tensor) -> torch.Tensor:
    _need_rank(x, 4, "upsample input", "N,C,H,W")
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    _need_rank(x, 4, "global_avg_pool input", "N,C,H,W")
    return x.mean(dim=(2, 3))


def l2_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.linalg.vector_norm(x, ord=2, dim=dim)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine of the angle between ``a`` and ``b``; zero vectors are rejected."""
    na = l2_norm(a, dim)
    nb = l2_norm(b, dim)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine_similarity: zero-length vector has no defined angle")
    return (a * b).sum(dim) / (na * nb)


def normalize_rows(z: torch.Tensor) -> torch.Tensor:
    n = l2_norm(z, 1)
    if bool((n == 0).any()):
        raise ValueError("normalize_rows: zero row cannot be normalised")
    return z / n[:, None]


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Row softmax with max-subtraction (the same path cross-entropy uses)."""
    _need_rank(logits, 2, "softmax logits", "N,K")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))


def softmax_cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    _need_rank(logits, 2, "cross-entropy logits", "N,K")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy: labels shape {tuple(labels.shape)} != batch axis N={logits.shape[0]}")
    k = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"cross-entropy: labels must lie in [0, {k}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    logp = log_softmax(logits)
    return -logp.gather(1, labels[:, None]).mean()


def argmax_rows(logits: torch.Tensor) -> torch.Tensor:
    """Per-row argmax; ties resolve to the lowest index."""
    _need_rank(logits, 2, "argmax logits", "N,K")
    top = logits.max(dim=1, keepdim=True).values
    k = logits.shape[1]
    idx = torch.arange(k).expand_as(logits)
    return torch.where(logits == top, idx, torch.full_like(idx, k)).min(dim=1).values


# ---------------------------------------------------------------- gradients


def backward(output: torch.Tensor, leaves: Mapping[str, torch.Tensor] | Iterable[torch.Tensor],
             retain_graph: bool = False):
    """Gradients of a scalar ``output`` with respect to ``leaves``.

    Leaves the output does not depend on get zero tensors. A mapping in gives
    a mapping out, otherwise a list in leaf order.
    """
    if output.numel() != 1:
        raise ValueError(f"backward: output must be a scalar, got shape {tuple(output.shape)}")
    check_finite(output.detach(), "backward output")
    named = isinstance(leaves, Mapping)
    items = list(leaves.items()) if named else list(enumerate(leaves))
    tensors = [t for _, t in items]
    if output.requires_grad:
        grads = torch.autograd.grad(output.reshape(()), tensors, allow_unused=True,
                                    retain_graph=retain_graph)
    else:
        grads = [None] * len(tensors)
    out = []
    for (key, leaf), g in zip(items, grads):
        g = torch.zeros_like(leaf) if g is None else g
        check_finite(g, f"gradient of leaf {key!r}")
        out.append((key, g))
    return dict(out) if named else [g for _, g in out]


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.

    ``params``/``grads`` are either single tensors or name->tensor mappings.
    Returns new parameter tensors (inputs are left untouched); ``state`` is
    advanced in place and its step counter increases by exactly one.
    """
    single = isinstance(params, torch.Tensor)
    if single:
        params, grads = {"_": params}, {"_": grads}
    if set(params) != set(grads):
        raise KeyError(f"adam_step: parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {tuple(g.shape)} != param {name!r} shape {tuple(p.shape)}")
        check_finite(g, f"adam_step gradient {name!r}")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name].to(p.dtype)
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.m[name] = m
            state.v[name] = v
            update = (m / c1) / (torch.sqrt(v / c2) + state.eps)
            out[name] = (p - state.lr * update).detach()
    state.step = t
    return out["_"] if single else out
