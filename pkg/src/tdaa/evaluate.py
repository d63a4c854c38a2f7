"""Downstream simulation: linear probes, TFR/ATA, transfer tables, retrieval, PCA."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import diffcore as dc
from .attack import generate_daes
from .datasets import ImageDataset, batch_iter
from .models import ENCODER_ARCH, ModelParams, encode, encoder_forward, head_arch, head_forward, init_params, predict

log = logging.getLogger(__name__)

_HEAD_STREAM = 0x4EAD
_SHUFFLE_STREAM = 0x33


# ---------------------------------------------------------------- metrics


def tfr(predictions, y_t: int) -> float:
    """Fraction of predictions equal to the target class."""
    p = np.asarray(predictions)
    if p.size == 0:
        raise ValueError("tfr: no predictions")
    return int((p == int(y_t)).sum()) / p.size


def ata(predictions, benign_labels) -> float:
    """Fraction of adversarial predictions that still match the benign label."""
    p = np.asarray(predictions)
    y = np.asarray(benign_labels)
    if p.shape != y.shape:
        raise ValueError(f"ata: length mismatch {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("ata: no predictions")
    return int((p == y).sum()) / p.size


@dataclass
class MetricsRecord:
    experiment_id: str
    attacker_dataset: str
    downstream_dataset: str
    victim_method: str
    criterion: str
    alpha: str
    epsilon: float
    seed: int
    y_t: int
    tfr: float
    ata: float
    mean_l2: float
    mean_linf: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.tfr <= 1.0 and 0.0 <= self.ata <= 1.0):
            raise ValueError(f"{self.experiment_id}: tfr/ata must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**d)


# ---------------------------------------------------------------- heads


@dataclass
class HeadResult:
    head: ModelParams
    encoder: ModelParams
    train_accuracy: float
    test_accuracy: float
    epoch_losses: list


def train_head(encoder: ModelParams, train: ImageDataset, test: ImageDataset | None = None, *,
               epochs: int = 20, lr: float = 1e-3, finetune: bool = False, finetune_lr: float = 1e-4,
               batch_size: int = 128, seed: int = 0, num_classes: int | None = None) -> HeadResult:
    """Train a linear head on encoder features (optionally fine-tuning the encoder).

    Features are standardised with train-split statistics of the initial
    encoder while optimising; the returned head folds that scaling into a
    single affine map on raw features. Frozen mode never touches the encoder.
    """
    k = train.num_classes if num_classes is None else num_classes
    observed = int(train.labels.max()) + 1
    if observed > k:
        raise ValueError(f"train_head: labels reach class {observed - 1} but num_classes={k}")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    head = init_params(head_arch(k), seed ^ _HEAD_STREAM)
    bs = min(batch_size, len(train))
    head_state = dc.AdamState(lr=lr)
    enc_state = dc.AdamState(lr=finetune_lr)
    hp = dict(head.tensors)
    ep = dict(encoder.detached().tensors)
    feats = encode(encoder, train.images)
    # standardise features for optimisation; folded back into the affine map at the end
    mu = feats.mean(dim=0)
    sd = feats.std(dim=0)
    sd = torch.where(sd > 1e-6, sd, torch.ones_like(sd))
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for idx in batch_iter(train, bs, epoch_seed=(seed ^ _SHUFFLE_STREAM) + epoch, shuffle=True):
            hl = {n: v.detach().requires_grad_(True) for n, v in hp.items()}
            if finetune:
                el = {n: v.detach().requires_grad_(True) for n, v in ep.items()}
                f = encoder_forward(ModelParams(ENCODER_ARCH, el), train.images[idx])
            else:
                f = feats[idx]
            f = (f - mu) / sd
            loss = dc.softmax_cross_entropy(head_forward(ModelParams(head.arch, hl), f), train.labels[idx])
            value = float(loss.detach())
            if not math.isfinite(value):
                raise dc.NonFiniteError(f"train_head: non-finite loss at epoch {epoch + 1}")
            if finetune:
                grads = dc.backward(loss, {**{"h." + n: v for n, v in hl.items()},
                                           **{"e." + n: v for n, v in el.items()}})
                hp = dc.adam_step(hl, {n: grads["h." + n] for n in hl}, head_state)
                ep = dc.adam_step(el, {n: grads["e." + n] for n in el}, enc_state)
            else:
                hp = dc.adam_step(hl, dc.backward(loss, hl), head_state)
            total += value * len(idx)
        losses.append(total / len(train))
        log.info("probe epoch %d/%d loss %.4f", epoch + 1, epochs, losses[-1])
    w = hp["fc.weight"].detach() / sd[None, :]
    b = hp["fc.bias"].detach() - w @ mu
    head = ModelParams(head.arch, {"fc.weight": w, "fc.bias": b})
    enc_out = ModelParams(ENCODER_ARCH, ep) if finetune else encoder
    train_acc = accuracy(enc_out, head, train)
    test_acc = accuracy(enc_out, head, test) if test is not None else float("nan")
    return HeadResult(head, enc_out, train_acc, test_acc, losses)


def accuracy(encoder: ModelParams, head: ModelParams, data: ImageDataset) -> float:
    pred = predict(head, encode(encoder, data.images))
    return ata(pred.numpy(), data.labels.numpy())


def target_class(encoder: ModelParams, head: ModelParams, threat_image: torch.Tensor) -> int:
    """The victim pipeline's own prediction on the threat image."""
    return int(predict(head, encode(encoder, threat_image[None]))[0])


# ---------------------------------------------------------------- attack evaluation


@dataclass
class AttackEvaluation:
    y_t: int
    tfr: float
    ata: float
    mean_l2: float
    mean_linf: float
    max_linf: float
    predictions: np.ndarray
    daes: torch.Tensor


def evaluate_attack(encoder: ModelParams, head: ModelParams, perturber, test: ImageDataset,
                    threat_image: torch.Tensor, eps: float, batch_size: int = 500) -> AttackEvaluation:
    """TFR, ATA and distortion of ``perturber``'s DAEs on ``test`` under one victim pipeline."""
    k = head.arch["num_classes"]
    if int(test.labels.max()) >= k:
        raise ValueError(f"evaluate_attack: test labels exceed head classes ({k})")
    y_t = target_class(encoder, head, threat_image)
    daes = generate_daes(perturber, test.images, eps, batch_size)
    pred = predict(head, encode(encoder, daes, batch_size)).numpy()
    diff = (daes - test.images).reshape(len(test), -1).double()
    l2 = dc.l2_norm(diff, 1)
    linf = diff.abs().max(dim=1).values
    return AttackEvaluation(y_t, tfr(pred, y_t), ata(pred, test.labels.numpy()), float(l2.mean()),
                            float(linf.mean()), float(linf.max()), pred, daes)


@dataclass
class TransferTable:
    sources: list
    targets: list
    values: np.ndarray  # [len(sources), len(targets)]

    def off_diagonal_mean(self) -> float:
        vals = [self.values[i, j] for i, s in enumerate(self.sources)
                for j, t in enumerate(self.targets) if s != t]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        lines = ["source," + ",".join(self.targets)]
        for i, s in enumerate(self.sources):
            lines.append(s + "," + ",".join(f"{v:.6f}" for v in self.values[i]))
        return "\n".join(lines) + "\n"


def transfer_matrix(perturbers: dict, pipelines: dict, test: ImageDataset, threat_image: torch.Tensor,
                    eps: float) -> TransferTable:
    """Entry (s, t): TFR of source ``s``'s DAEs under target ``t``'s encoder and head.

    ``perturbers`` maps source name -> generator; ``pipelines`` maps target
    name -> (encoder, head). Each entry is a plain ``evaluate_attack`` call.
    """
    sources, targets = list(perturbers), list(pipelines)
    values = np.zeros((len(sources), len(targets)))
    for i, s in enumerate(sources):
        for j, t in enumerate(targets):
            enc, head = pipelines[t]
            values[i, j] = evaluate_attack(enc, head, perturbers[s], test, threat_image, eps).tfr
    return TransferTable(sources, targets, values)


# ---------------------------------------------------------------- retrieval


def topk_neighbors(queries: np.ndarray, gallery: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest gallery rows per query (L2; ties -> lowest index)."""
    if k > gallery.shape[0]:
        raise ValueError(f"k={k} exceeds gallery size {gallery.shape[0]}")
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    out = np.empty((q.shape[0], k), dtype=np.int64)
    for start in range(0, q.shape[0], 256):
        d = ((q[start:start + 256, None, :] - g[None, :, :]) ** 2).sum(axis=2)
        out[start:start + 256] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def majority_label(labels: np.ndarray) -> int:
    counts = np.bincount(labels)
    return int(np.argmax(counts))


@dataclass
class RetrievalResult:
    topk_tfr: float
    mean_target_fraction: float
    y_t: int
    per_query_success: np.ndarray
    benign_majority_accuracy: float


def retrieval_topk_tfr(gallery_features, gallery_labels, query_features, y_t: int, k: int = 10,
                       query_labels=None) -> RetrievalResult:
    """Share of queries whose top-k gallery neighbours hold a strict majority of ``y_t``."""
    gl = np.asarray(gallery_labels, dtype=np.int64)
    nn = topk_neighbors(np.asarray(query_features), np.asarray(gallery_features), k)
    hits = (gl[nn] == int(y_t)).sum(axis=1)
    success = hits * 2 > k
    bench = float("nan")
    if query_labels is not None:
        ql = np.asarray(query_labels, dtype=np.int64)
        bench = float(np.mean((gl[nn] == ql[:, None]).sum(axis=1) * 2 > k))
    return RetrievalResult(float(success.mean()), float((hits / k).mean()), int(y_t), success, bench)


def retrieval_target_class(gallery_features, gallery_labels, threat_feature, k: int = 10) -> int:
    """Retrieval's own "prediction" for the threat image: majority label of its top-k."""
    nn = topk_neighbors(np.asarray(threat_feature)[None], np.asarray(gallery_features), k)[0]
    return majority_label(np.asarray(gallery_labels, dtype=np.int64)[nn])


# ---------------------------------------------------------------- PCA


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray  # [2, D]
    explained_variance: tuple
    total_variance: float
    mean: np.ndarray


def _power(cov: np.ndarray, iters: int):
    v = np.ones(cov.shape[0]) / math.sqrt(cov.shape[0])
    for _ in range(iters):
        w = cov @ v
        n = np.linalg.norm(w)
        if n == 0.0:
            return 0.0, v
        v = w / n
    return float(v @ cov @ v), v


def pca_project(features, iters: int = 1000) -> PCAResult:
    """Top-2 principal axes by power iteration with deflation (all-ones start)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"pca_project needs an [N>=3, D] array, got shape {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    total = float(np.trace(cov))
    l1, v1 = _power(cov, iters)
    l2, v2 = _power(cov - l1 * np.outer(v1, v1), iters)
    tol = 1e-12 * max(total, 1e-300)
    if total <= 0 or l1 <= tol or l2 <= tol:
        raise ValueError(f"pca_project: degenerate data, centred rank < 2 "
                         f"(variances {l1:.3g}, {l2:.3g} of total {total:.3g})")
    comps = np.stack([v1, v2])
    return PCAResult(xc @ comps.T, comps, (l1, l2), total, mean)
