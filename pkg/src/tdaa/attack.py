"""Perturbation generator training against a frozen encoder.

The generator maps a benign image ``x`` to a perturbation bounded by ``eps``;
training minimises ``alpha * feature_distance(E(x_adv), E(x_t)) + ||x_adv - x||``
so that every DAE lands on the threat image's feature. ``alpha = inf`` drops
the consistency term. ``train_fixed_noise`` optimises one shared perturbation
with the same objective as a baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffcore as dc
from .datasets import ImageDataset, batch_iter
from .models import (GENERATOR_ARCH, ModelParams, encode, encoder_forward, generator_forward, init_params)
from .rng import SplitMix64, unit_float

log = logging.getLogger(__name__)

CRITERIA = ("l2", "cosine", "infonce")
_SHUFFLE_STREAM = 0x77


class AttackDiverged(dc.NonFiniteError):
    """Training produced a non-finite loss; ``last_good`` holds the prior params."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class AttackConfig:
    threat_image: torch.Tensor
    alpha: float = 2.0
    eps: float = 10 / 255
    eta: float = 1.0
    criterion: str = "l2"
    lr: float = 2e-4
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    infonce_temperature: float = 0.5
    attacker_dataset: str = "shapes10"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}; choose from {CRITERIA}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if tuple(self.threat_image.shape) != (3, 32, 32):
            raise ValueError(f"threat image must be [3,32,32], got {tuple(self.threat_image.shape)}")

    def describe(self) -> dict:
        return {"alpha": alpha_label(self.alpha), "eps": self.eps, "eta": self.eta,
                "criterion": self.criterion, "lr": self.lr, "batch_size": self.batch_size,
                "epochs": self.epochs, "seed": self.seed, "infonce_temperature": self.infonce_temperature,
                "attacker_dataset": self.attacker_dataset, **self.extra}


def alpha_label(alpha: float) -> str:
    if math.isinf(alpha):
        return "inf"
    return f"{alpha:g}"


def parse_alpha(value) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity"):
            return math.inf
        return float(value)
    return float(value)


# ---------------------------------------------------------------- losses


def adversarial_loss(f_adv: torch.Tensor, f_t: torch.Tensor, criterion: str = "l2",
                     tau: float = 0.5) -> torch.Tensor:
    """Distance of each adversarial feature to the threat feature, batch mean."""
    if f_adv.dim() != 2 or f_t.shape != (f_adv.shape[1],):
        raise dc.ShapeError(f"adversarial_loss: f_adv [B,D] and f_t [D] expected, "
                            f"got {tuple(f_adv.shape)} / {tuple(f_t.shape)}")
    if criterion == "l2":
        return dc.l2_norm(f_adv - f_t[None, :], 1).mean()
    if criterion == "cosine":
        return (1.0 - dc.cosine_similarity(f_adv, f_t[None, :].expand_as(f_adv), 1)).mean()
    if criterion == "infonce":
        # logits row i: [cos(a_i, t), cos(a_i, a_j) for j != i]; positive is column 0
        a = dc.normalize_rows(f_adv)
        t = dc.normalize_rows(f_t[None, :])
        b = a.shape[0]
        pos = (a @ t.T) / tau
        neg = (a @ a.T) / tau
        neg = neg.masked_fill(torch.eye(b, dtype=torch.bool), float("-inf"))
        logits = torch.cat([pos, neg], dim=1)
        m = logits.max(dim=1, keepdim=True).values.detach()
        lse = m.squeeze(1) + torch.log(torch.exp(logits - m).sum(dim=1))
        return (lse - pos.squeeze(1)).mean()
    raise ValueError(f"unknown criterion {criterion!r}")


def consistency_loss(x_adv: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-image L2 norm of ``x_adv - x``."""
    if x_adv.shape != x.shape:
        raise dc.ShapeError(f"consistency_loss: shapes differ {tuple(x_adv.shape)} vs {tuple(x.shape)}")
    return dc.l2_norm((x_adv - x).reshape(x.shape[0], -1), 1).mean()


def apply_perturbation(x: torch.Tensor, delta: torch.Tensor, eps: float) -> torch.Tensor:
    delta = dc.clamp_st(delta, -eps, eps)
    return dc.clamp_st(x + delta, 0.0, 1.0)


def make_dae(generator: ModelParams, x: torch.Tensor, eps: float) -> torch.Tensor:
    """``clamp(x + clamp(G(x), -eps, eps), 0, 1)``."""
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    return apply_perturbation(x, generator_forward(generator, x, eps), eps)


@torch.no_grad()
def generate_daes(perturber, images: torch.Tensor, eps: float, batch_size: int = 500) -> torch.Tensor:
    """DAEs for a whole image tensor; ``perturber`` is a generator or a fixed delta."""
    if isinstance(perturber, ModelParams):
        gen = perturber.detached()
        out = [make_dae(gen, images[i:i + batch_size], eps) for i in range(0, images.shape[0], batch_size)]
        return torch.cat(out)
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    return apply_perturbation(images, perturber.detach()[None], eps)


# ---------------------------------------------------------------- training


def _objective(alpha: float, adv: torch.Tensor, con: torch.Tensor) -> torch.Tensor:
    if math.isinf(alpha):
        return adv
    return alpha * adv + con


def _threat_feature(encoder: ModelParams, threat_image: torch.Tensor) -> torch.Tensor:
    return encode(encoder, threat_image[None])[0]


def _fingerprint(params: ModelParams) -> bytes:
    return b"".join(t.detach().numpy().tobytes() for t in params.tensors.values())


def _train(encoder: ModelParams, config: AttackConfig, data: ImageDataset, trainable: dict, perturb,
           project=None, progress=None):
    """Shared loop. ``perturb(leaves, x)`` returns x_adv for a batch."""
    frozen = encoder.detached()
    before = _fingerprint(frozen)
    f_t = _threat_feature(frozen, config.threat_image)
    state = dc.AdamState(lr=config.lr)
    params = dict(trainable)
    bs = min(config.batch_size, len(data))
    history = {"epoch_loss": [], "epoch_adv": [], "epoch_con": [], "epoch_feature_distance": [],
               "steps": []}
    for epoch in range(config.epochs):
        sums = np.zeros(4)
        n_seen = 0
        for idx in batch_iter(data, bs, epoch_seed=(config.seed ^ _SHUFFLE_STREAM) + epoch, shuffle=True):
            if config.criterion == "infonce" and len(idx) < 2:
                continue
            x = data.images[idx]
            leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
            x_adv = perturb(leaves, x)
            f_adv = encoder_forward(frozen, x_adv)
            adv = adversarial_loss(f_adv, f_t, config.criterion, config.infonce_temperature)
            con = consistency_loss(x_adv, x)
            loss = _objective(config.alpha, adv, con)
            values = (float(loss.detach()), float(adv.detach()), float(con.detach()))
            if not all(math.isfinite(v) for v in values):
                raise AttackDiverged(f"non-finite attack loss at epoch {epoch + 1}, step {state.step + 1}",
                                     last_good=params)
            grads = dc.backward(loss, leaves)
            params = dc.adam_step(leaves, grads, state)
            if project is not None:
                params = project(params)
            with torch.no_grad():
                dist = float(dc.l2_norm(f_adv.detach() - f_t[None], 1).sum())
            history["steps"].append(values)
            sums += np.array([values[0], values[1], values[2], 0.0]) * len(idx)
            sums[3] += dist
            n_seen += len(idx)
        means = sums / n_seen
        history["epoch_loss"].append(means[0])
        history["epoch_adv"].append(means[1])
        history["epoch_con"].append(means[2])
        history["epoch_feature_distance"].append(means[3])
        log.info("attack epoch %d/%d loss %.4f adv %.4f con %.4f dist %.4f",
                 epoch + 1, config.epochs, *means)
        if progress:
            progress(epoch, means)
    if _fingerprint(encoder.detached()) != before:
        raise RuntimeError("frozen encoder was modified during attack training")
    history["epoch_loss"] = [float(v) for v in history["epoch_loss"]]
    for k in ("epoch_adv", "epoch_con", "epoch_feature_distance"):
        history[k] = [float(v) for v in history[k]]
    return params, history


def train_generator(encoder: ModelParams, config: AttackConfig, data: ImageDataset, progress=None):
    """Train the example-specific generator; returns ``(generator, log)``."""
    gen = init_params(GENERATOR_ARCH, config.seed)

    def perturb(leaves, x):
        return make_dae(ModelParams(GENERATOR_ARCH, leaves), x, config.eps)

    params, history = _train(encoder, config, data, gen.tensors, perturb, progress=progress)
    return ModelParams(GENERATOR_ARCH, {k: v.detach() for k, v in params.items()}), history


def init_fixed_noise(eps: float, seed: int) -> torch.Tensor:
    u = unit_float(SplitMix64(seed).take(3 * 32 * 32))
    return torch.from_numpy(((2.0 * u - 1.0) * eps).astype(np.float32).reshape(3, 32, 32))


def train_fixed_noise(encoder: ModelParams, config: AttackConfig, data: ImageDataset, progress=None):
    """Optimise a single shared delta, hard-clamped to ``[-eps, eps]`` after every step."""
    eps = config.eps

    def perturb(leaves, x):
        return apply_perturbation(x, leaves["delta"][None], eps)

    def project(params):
        return {"delta": params["delta"].clamp(-eps, eps)}

    params, history = _train(encoder, config, data, {"delta": init_fixed_noise(eps, config.seed)},
                             perturb, project=project, progress=progress)
    return params["delta"].detach(), history


@torch.no_grad()
def check_alignment(encoder: ModelParams, x_adv: torch.Tensor, threat_image: torch.Tensor, eta: float):
    """Per-sample ``||E(x_adv) - E(x_t)||`` and the fraction within ``eta``."""
    if not eta > 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    # one forward pass so a replicated threat image yields exactly zero distance
    feats = encode(encoder, torch.cat([threat_image[None], x_adv]), batch_size=x_adv.shape[0] + 1)
    d = dc.l2_norm(feats[1:] - feats[:1], 1)
    return d, float((d <= eta).double().mean())
