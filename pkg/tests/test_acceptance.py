"""Acceptance criteria, one test per criterion, each emitting a PASS/FAIL line.

The end-to-end criteria share one default-config pipeline run (about 1.5 h
on a single core). Set ``TDAA_ACCEPTANCE_DIR`` to keep and reuse its
artifacts between sessions. ``TDAA_ACCEPTANCE_CONFIG`` swaps in another
config file, which is only useful for smoke-testing this harness.
"""

import json
import time

import numpy as np
import torch

from tdaa import diffcore as dc
from tdaa.attack import generate_daes
from tdaa.cli import Context, load_model, load_perturber
from tdaa.config import load_config
from tdaa.datasets import parse_cifar10_bytes
from tdaa.evaluate import ata, evaluate_attack, retrieval_topk_tfr, tfr
from tdaa.gradcheck import PRIMITIVE_CASES, finite_difference_check, naive_conv2d
from tdaa.io import read_manifest
from tdaa.models import GENERATOR_ARCH, encode, init_params

from conftest import ACCEPTANCE_CONFIG, ACCEPTANCE_LINES

REFERENCE_CORES = 4
BASE_ID = "simclr_lite-l2-a2-shapes10-to-shapes10"


def record(number: int, name: str, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"CRITERION {number} {'PASS' if ok else 'FAIL'} [{name}] {detail}")
    assert ok, f"criterion {number} ({name}): {detail}"


def scaled_budget(seconds_at_reference: float, cores: int) -> float:
    """Wall-clock budget stated for 4 cores, scaled linearly to the cores actually available."""
    return seconds_at_reference * REFERENCE_CORES / max(1, min(cores, REFERENCE_CORES))


def metrics(out, exp_id: str) -> dict:
    return json.loads((out / "metrics" / f"{exp_id}.json").read_text())


def context(out) -> Context:
    return Context(load_config(ACCEPTANCE_CONFIG), out, reuse=True, force=False, command="eval")


def load_split(out, name: str, split: str):
    return parse_cifar10_bytes((out / "data" / f"{name}-{split}.bin").read_bytes(), split, source=name)


# ---------------------------------------------------------------- 1-4: exact oracles


def test_criterion_01_gradient_checks():
    t0 = time.time()
    reports = [finite_difference_check(name, cases=20, seed=i) for i, name in enumerate(sorted(PRIMITIVE_CASES))]
    elapsed = time.time() - t0
    budget = scaled_budget(120, torch.get_num_threads())
    worst = max(reports, key=lambda r: r.max_rel_err)
    ok = all(r.cases >= 20 and r.entries > 0 and r.max_rel_err <= 1e-5 for r in reports) and elapsed <= budget
    record(1, "gradient checks", ok,
           f"{len(reports)} primitives x 20 cases, worst rel err {worst.max_rel_err:.2e} ({worst.name}); "
           f"{elapsed:.1f}s vs budget {budget:.0f}s ({torch.get_num_threads()} core(s))")


def test_criterion_02_convolution_oracle():
    t0 = time.time()
    g = torch.Generator().manual_seed(2024)
    worst = 0.0
    configs = [(2, 3, 4, 8, 3, 1, 1), (1, 2, 5, 9, 3, 2, 1), (3, 1, 2, 7, 1, 1, 0), (2, 4, 3, 6, 2, 2, 0),
               (1, 3, 32, 32, 3, 1, 1)]
    for n, c, o, h, k, stride, pad in configs:
        x = torch.randn((n, c, h, h), generator=g, dtype=torch.float64)
        w = torch.randn((o, c, k, k), generator=g, dtype=torch.float64)
        b = torch.randn((o,), generator=g, dtype=torch.float64)
        got = dc.conv2d(x, w, b, stride, pad).numpy()
        want = naive_conv2d(x.numpy(), w.numpy(), b.numpy(), stride, pad)
        worst = max(worst, float(np.abs(got - want).max()))
    elapsed = time.time() - t0
    budget = scaled_budget(30, torch.get_num_threads())
    record(2, "convolution oracle", worst <= 1e-10 and elapsed <= budget,
           f"5 configurations, max abs diff {worst:.2e}; {elapsed:.1f}s vs budget {budget:.0f}s")


def test_criterion_03_budget_invariant(full_run):
    out, _ = full_run
    ctx = context(out)
    eps = ctx.cfg["attack"]["epsilon"]
    images = torch.cat([load_split(out, "shapes10", "train").images, load_split(out, "shapes10", "test").images])
    perturbers = [("trained generator", load_perturber(ctx.perturber_path(False)), images),
                  ("fixed noise", load_perturber(ctx.perturber_path(True)), images)]
    perturbers += [(f"untrained generator {s}", init_params(GENERATOR_ARCH, s), images[:1000]) for s in range(3)]
    total, bad, worst = 0, 0, 0.0
    for _, p, x in perturbers:
        daes = generate_daes(p, x, eps)
        linf = (daes - x).reshape(len(x), -1).abs().max(dim=1).values
        in_range = (daes.reshape(len(x), -1).min(dim=1).values >= 0) & (daes.reshape(len(x), -1).max(dim=1).values <= 1)
        bad += int(((linf > eps + 1e-6) | ~in_range).sum())
        worst = max(worst, float(linf.max()))
        total += len(x)
    record(3, "epsilon budget", total >= 10_000 and bad == 0,
           f"{total} DAEs, {bad} violations, max l-inf {worst:.6f} vs eps {eps:.6f}")


def test_criterion_04_metric_oracles():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 500))
        pred, lab, y_t = rng.integers(0, 10, n), rng.integers(0, 10, n), int(rng.integers(0, 10))
        if tfr(pred, y_t) != sum(int(p) == y_t for p in pred) / n:
            mismatches += 1
        if ata(pred, lab) != sum(int(p) == int(y) for p, y in zip(pred, lab)) / n:
            mismatches += 1
    identity_fail = 0
    for case in range(50):
        lab = rng.integers(0, 10, int(rng.integers(1, 2000)))
        y_t = case % 10
        pred = np.full(len(lab), y_t)
        if not (tfr(pred, y_t) == 1.0 and ata(pred, lab) == int((lab == y_t).sum()) / len(lab)):
            identity_fail += 1
    uniform = ata(np.full(1000, 3), np.repeat(np.arange(10), 100))
    ok = mismatches == 0 and identity_fail == 0 and uniform == 0.1
    record(4, "metric oracles", ok,
           f"1000 random vectors: {mismatches} mismatches; 50 TFR=1 cases: {identity_fail} identity failures; "
           f"uniform-label ATA {uniform}")


# ---------------------------------------------------------------- 5-11: end-to-end proxies


def test_criterion_05_end_to_end_efficacy(full_run):
    out, info = full_run
    m = metrics(out, f"gen-{BASE_ID}")
    budget = scaled_budget(30 * 60, info["cores"])
    ok = m["tfr"] >= 0.90 and m["ata"] <= 0.15 and info["seconds"] <= budget
    record(5, "end-to-end efficacy", ok,
           f"TFR {m['tfr']:.4f} (>= 0.90), ATA {m['ata']:.4f} (<= 0.15), y_t {m['y_t']}, "
           f"clean acc {m['extra']['clean_accuracy']:.4f}; pipeline {info['seconds'] / 60:.1f} min vs budget "
           f"{budget / 60:.0f} min ({info['cores']} core(s))")


def test_criterion_06_fixed_noise_gap(full_run):
    out, _ = full_run
    gen, fixed = metrics(out, f"gen-{BASE_ID}")["tfr"], metrics(out, f"fixed-{BASE_ID}")["tfr"]
    record(6, "fixed-noise gap", gen - fixed >= 0.20,
           f"generator TFR {gen:.4f} - fixed-noise TFR {fixed:.4f} = {gen - fixed:.4f} (>= 0.20)")


def test_criterion_07_alpha_direction(full_run):
    out, _ = full_run
    m = {a: metrics(out, f"gen-simclr_lite-l2-a{a}-shapes10-to-shapes10") for a in ("2", "5", "inf")}
    l2 = {a: m[a]["mean_l2"] for a in m}
    ok = l2["2"] < l2["inf"] and l2["2"] <= l2["5"] <= l2["inf"] and m["5"]["tfr"] >= m["2"]["tfr"] - 0.02
    record(7, "alpha ablation direction", ok,
           f"mean l2 a=2 {l2['2']:.4f}, a=5 {l2['5']:.4f}, a=inf {l2['inf']:.4f}; "
           f"TFR a=2 {m['2']['tfr']:.4f}, a=5 {m['5']['tfr']:.4f}")


def test_criterion_08_cross_dataset(full_run):
    out, _ = full_run
    m = metrics(out, "gen-simclr_lite-l2-a2-shapes10-to-shapes10b")
    record(8, "cross-dataset", m["tfr"] >= 0.75, f"variant A -> variant B TFR {m['tfr']:.4f} (>= 0.75)")


def test_criterion_09_transfer_matrix(full_run):
    out, _ = full_run
    ctx = context(out)
    methods = ctx.cfg["eval"]["transfer_methods"]
    lines = (out / "transfer.csv").read_text().splitlines()
    table = np.array([[float(v) for v in line.split(",")[1:]] for line in lines[1:]])
    test = load_split(out, "shapes10", "test")
    x_t = ctx.threat_image()
    eps = ctx.cfg["attack"]["epsilon"]
    worst = 0.0
    for i, m in enumerate(methods):
        entry = metrics(out, f"transfer-{m}-to-{m}-l2-a2-shapes10")["tfr"]
        direct = evaluate_attack(load_model(ctx.encoder_path(m)), load_model(ctx.head_path(m, "shapes10", False)),
                                 load_perturber(ctx.perturber_path(False, victim=m)), test, x_t, eps).tfr
        worst = max(worst, abs(entry - direct), abs(table[i, i] - round(direct, 6)))
    off = [table[i, j] for i in range(3) for j in range(3) if i != j]
    ok = table.shape == (3, 3) and worst <= 1e-12 and float(np.mean(off)) >= 0.5
    record(9, "transfer matrix", ok,
           f"3x3 over {','.join(methods)}; diagonal vs direct max diff {worst:.1e}; "
           f"off-diagonal mean TFR {np.mean(off):.4f} (>= 0.5)")


def _brute_topk_success(gallery, labels, queries, y_t, k):
    hits = 0
    for q in queries:
        order = sorted(range(len(gallery)), key=lambda i: (float(((gallery[i] - q) ** 2).sum()), i))
        hits += [int(labels[i]) for i in order[:k]].count(y_t) * 2 > k
    return hits / len(queries)


def test_criterion_10_retrieval(full_run):
    out, _ = full_run
    ctx = context(out)
    m = metrics(out, f"retrieval-{BASE_ID}")
    enc = load_model(ctx.encoder_path("simclr_lite"))
    train, test = load_split(out, "shapes10", "train"), load_split(out, "shapes10", "test")
    gen = load_perturber(ctx.perturber_path(False))
    gallery = encode(enc, train.images[:100]).double().numpy()
    labels = train.labels[:100].numpy()
    queries = encode(enc, generate_daes(gen, test.images[:20], ctx.cfg["attack"]["epsilon"])).double().numpy()
    agree = all(retrieval_topk_tfr(gallery, labels, queries, y, 10).topk_tfr
                == _brute_topk_success(gallery, labels, queries, y, 10) for y in range(10))
    record(10, "retrieval", m["tfr"] >= 0.85 and agree,
           f"top-10 TFR {m['tfr']:.4f} (>= 0.85), y_t {m['y_t']}, mean target fraction "
           f"{m['extra']['mean_target_fraction']:.4f}; 100-item gallery oracle agreement: {agree}")


def test_criterion_11_finetuned_persistence(full_run):
    out, _ = full_run
    m = metrics(out, f"gen-{BASE_ID}-ft")
    record(11, "fine-tuned encoder", m["tfr"] >= 0.60,
           f"TFR on fine-tuned pipeline {m['tfr']:.4f} (>= 0.60), clean acc {m['extra']['clean_accuracy']:.4f}")


# ---------------------------------------------------------------- 12-13: plumbing


def test_criterion_12_determinism(full_run, full_rerun):
    (a, _), (b, _) = full_run, full_rerun
    same_report = (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    ma, mb = read_manifest(a), read_manifest(b)
    differing = sorted(k for k in set(ma) | set(mb) if ma.get(k) != mb.get(k))
    record(12, "determinism", same_report and not differing,
           f"report.csv identical: {same_report}; {len(ma)} MANIFEST entries, {len(differing)} differ"
           + (f" (first: {differing[0]})" if differing else ""))


def test_criterion_13_criterion_ablation(full_run):
    out, _ = full_run
    rows = [line.split(",") for line in (out / "ablations" / "criterion.csv").read_text().splitlines()[1:]]
    tfrs = {r[0]: float(r[1]) for r in rows}
    present = sorted(tfrs) == ["cosine", "infonce", "l2"]
    l2_best = present and tfrs["l2"] >= max(tfrs.values())
    note = "l2 is the maximum" if l2_best else "expected-outcome warning: l2 is not the maximum"
    record(13, "criterion ablation", present,
           ", ".join(f"{k} TFR {v:.4f}" for k, v in tfrs.items()) + f"; {note}")
