"""Victim encoders: simclr_lite, supcon_lite and supervised_ce recipes."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch

from . import diffcore as dc
from .datasets import AugmentationRng, ImageDataset, augment_batch, batch_iter
from .models import (ENCODER_ARCH, PROJECTION_ARCH, ModelParams, encoder_forward, head_arch, head_forward,
                     init_params, projection_forward)

log = logging.getLogger(__name__)

METHODS = ("simclr_lite", "supcon_lite", "supervised_ce")

# offsets xor-ed into the run seed so each stream is distinct
_ENCODER_STREAM = 0x0
_AUX_STREAM = 0x1
_AUG_STREAM = 0xA0
_SHUFFLE_STREAM = 0x5A


@dataclass
class PretrainConfig:
    method: str = "simclr_lite"
    temperature: float = 0.5
    batch_size: int = 128
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    dataset: str = "shapes10"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown pretraining method {self.method!r}; choose from {METHODS}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")


def _similarity_logits(z: torch.Tensor, tau: float) -> torch.Tensor:
    zn = dc.normalize_rows(z)
    return (zn @ zn.T) / tau


def info_nce_loss(z1: torch.Tensor, z2: torch.Tensor, tau: float) -> torch.Tensor:
    """NT-Xent over the 2B stacked views; row i's positive is its paired view."""
    if z1.shape != z2.shape or z1.dim() != 2:
        raise dc.ShapeError(f"info_nce_loss: views must share shape [B,D], got {tuple(z1.shape)} / {tuple(z2.shape)}")
    b = z1.shape[0]
    if b < 2:
        raise ValueError(f"info_nce_loss needs B >= 2, got {b}")
    sim = _similarity_logits(torch.cat([z1, z2]), tau)
    n = 2 * b
    eye = torch.eye(n, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    pos = torch.cat([torch.arange(b, n), torch.arange(0, b)])
    m = sim.max(dim=1, keepdim=True).values.detach()
    lse = m.squeeze(1) + torch.log(torch.exp(sim - m).sum(dim=1))
    return (lse - sim[torch.arange(n), pos]).mean()


def supcon_loss(z: torch.Tensor, labels, tau: float) -> torch.Tensor:
    """Supervised contrastive loss; anchors without positives are skipped."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = z.shape[0]
    if labels.shape != (n,):
        raise dc.ShapeError(f"supcon_loss: labels shape {tuple(labels.shape)} != ({n},)")
    sim = _similarity_logits(z, tau)
    eye = torch.eye(n, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    m = sim.max(dim=1, keepdim=True).values.detach()
    log_prob = sim - (m + torch.log(torch.exp(sim - m).sum(dim=1, keepdim=True)))
    positives = (labels[:, None] == labels[None, :]) & ~eye
    counts = positives.sum(dim=1)
    keep = counts > 0
    if not bool(keep.any()):
        raise ValueError("supcon_loss: no anchor has a positive")
    per_anchor = -(log_prob.masked_fill(~positives, 0.0).sum(dim=1)[keep] / counts[keep])
    return per_anchor.mean()


def pretrain_encoder(config: PretrainConfig, dataset: ImageDataset, progress=None):
    """Train a victim encoder; returns ``(encoder, metadata)``.

    The projection head (contrastive recipes) or the linear head
    (supervised_ce) is discarded. ``metadata['epoch_losses']`` holds the
    per-epoch mean loss.
    """
    cfg = config
    encoder = init_params(ENCODER_ARCH, cfg.seed ^ _ENCODER_STREAM)
    if cfg.method == "supervised_ce":
        aux = init_params(head_arch(dataset.num_classes), cfg.seed ^ _AUX_STREAM)
    else:
        aux = init_params(PROJECTION_ARCH, cfg.seed ^ _AUX_STREAM)
    params = {f"enc.{k}": v for k, v in encoder.tensors.items()}
    params.update({f"aux.{k}": v for k, v in aux.tensors.items()})
    state = dc.AdamState(lr=cfg.lr)
    aug_rng = AugmentationRng(cfg.seed ^ _AUG_STREAM)
    bs = min(cfg.batch_size, len(dataset))

    epoch_losses = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in batch_iter(dataset, bs, epoch_seed=(cfg.seed ^ _SHUFFLE_STREAM) + epoch, shuffle=True):
            if len(idx) < 2:
                continue
            x = dataset.images[idx]
            y = dataset.labels[idx]
            v1, v2 = augment_batch(x, aug_rng)
            leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
            enc = ModelParams(ENCODER_ARCH, {k[4:]: v for k, v in leaves.items() if k.startswith("enc.")})
            head = ModelParams(aux.arch, {k[4:]: v for k, v in leaves.items() if k.startswith("aux.")})
            if cfg.method == "supervised_ce":
                loss = dc.softmax_cross_entropy(head_forward(head, encoder_forward(enc, v1)), y)
            else:
                feats = encoder_forward(enc, torch.cat([v1, v2]))
                z = projection_forward(head, feats)
                if cfg.method == "simclr_lite":
                    loss = info_nce_loss(z[:len(idx)], z[len(idx):], cfg.temperature)
                else:
                    loss = supcon_loss(z, torch.cat([y, y]), cfg.temperature)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise dc.NonFiniteError(
                    f"pretrain {cfg.method}: non-finite loss at epoch {epoch + 1}, step {state.step + 1}")
            grads = dc.backward(loss, leaves)
            params = dc.adam_step(leaves, grads, state)
            total += value * len(idx)
            count += len(idx)
        epoch_losses.append(total / count)
        log.info("pretrain %s epoch %d/%d loss %.4f", cfg.method, epoch + 1, cfg.epochs, epoch_losses[-1])
        if progress:
            progress(epoch, epoch_losses[-1])

    final = ModelParams(ENCODER_ARCH, {k[4:]: v.detach() for k, v in params.items() if k.startswith("enc.")})
    meta = {"method": cfg.method, "seed": cfg.seed, "config": asdict(cfg),
            "final_loss": epoch_losses[-1], "epoch_losses": epoch_losses,
            "dataset": dataset.provenance}
    return final, meta
