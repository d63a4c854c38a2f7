"""Module-level examples that need the default-config pipeline artifacts."""

import json

import numpy as np
import torch

from tdaa.attack import check_alignment, generate_daes
from tdaa.checkpoint import load_checkpoint
from tdaa.cli import load_model, load_perturber
from tdaa.models import encode

from test_acceptance import BASE_ID, context, load_split, metrics


def _head_meta(out, method, dataset="shapes10", finetune=False):
    return load_checkpoint(context(out).head_path(method, dataset, finetune))[1]


def test_simclr_probe_accuracy_floor(full_run):
    out, _ = full_run
    meta = _head_meta(out, "simclr_lite")
    assert meta["test_accuracy"] >= 0.85, f"simclr_lite linear probe test accuracy {meta['test_accuracy']:.4f}"


def test_pretrain_loss_decreases_early(full_run):
    out, _ = full_run
    for method in context(out).cfg["pretrain"]["methods"]:
        _, meta = load_checkpoint(context(out).encoder_path(method))
        first = np.array(meta["epoch_losses"][:5])
        assert np.median(np.diff(first)) < 0, f"{method}: {first}"


def test_encoders_separate_classes(full_run):
    out, _ = full_run
    test = load_split(out, "shapes10", "test")
    same = test.labels[:, None] == test.labels[None, :]
    off_diag = ~torch.eye(len(test), dtype=torch.bool)
    for method in context(out).cfg["pretrain"]["methods"]:
        feats = encode(load_model(context(out).encoder_path(method)), test.images).double()
        d = torch.cdist(feats, feats)
        intra, inter = float(d[same & off_diag].mean()), float(d[~same].mean())
        assert intra < inter, f"{method}: intra {intra:.4f} inter {inter:.4f}"


def test_attack_feature_distance_converges(full_run):
    out, _ = full_run
    path = context(out).perturber_path(False).with_suffix(".log.json")
    dist = json.loads(path.read_text())["epoch_feature_distance"]
    assert dist[-1] < 0.25 * dist[0], f"final {dist[-1]:.4f} vs epoch-1 {dist[0]:.4f}"


def test_fixed_noise_weaker_than_generator(full_run):
    out, _ = full_run
    assert metrics(out, f"fixed-{BASE_ID}")["tfr"] < metrics(out, f"gen-{BASE_ID}")["tfr"]


def test_trained_generator_properties(full_run):
    out, _ = full_run
    ctx = context(out)
    eps = ctx.cfg["attack"]["epsilon"]
    gen = load_perturber(ctx.perturber_path(False))
    enc = load_model(ctx.encoder_path("simclr_lite"))
    test = load_split(out, "shapes10", "test")
    daes = generate_daes(gen, test.images, eps)
    assert float((daes - test.images).abs().max()) <= eps + 1e-6
    delta = (daes - test.images)[:100].reshape(100, -1).double()
    d = torch.cdist(delta, delta)
    iu = torch.triu_indices(100, 100, 1)
    assert float((d[iu[0], iu[1]] > 1e-6).double().mean()) > 0.99
    dist, _ = check_alignment(enc, daes, ctx.threat_image(), 1.0)
    _, frac = check_alignment(enc, daes, ctx.threat_image(), float(dist.median()))
    assert abs(frac - 0.5) <= 1 / len(dist)
