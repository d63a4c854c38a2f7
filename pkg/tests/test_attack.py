import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tdaa import diffcore as dc
from tdaa.attack import (AttackConfig, AttackDiverged, adversarial_loss, alpha_label, check_alignment,
                         consistency_loss, generate_daes, init_fixed_noise, make_dae, parse_alpha, train_fixed_noise,
                         train_generator)
from tdaa.checkpoint import dumps
from tdaa.datasets import gen_shapes10
from tdaa.models import ENCODER_ARCH, GENERATOR_ARCH, generator_forward, init_params

F64 = torch.float64
EPS = 10 / 255
EPS32 = float(torch.tensor(EPS, dtype=torch.float32))


@pytest.fixture(scope="module")
def small():
    data = gen_shapes10(42, "train", 60)
    enc = init_params(ENCODER_ARCH, 0)
    return data, enc, data.images[0]


def _cfg(threat, **kw):
    base = dict(threat_image=threat, epochs=2, batch_size=32)
    base.update(kw)
    return AttackConfig(**base)


# ---------------------------------------------------------------- losses


def test_l2_identical_features_zero():
    f_t = torch.randn(128, dtype=F64)
    assert adversarial_loss(f_t.expand(4, 128).clone(), f_t, "l2").item() == 0.0


def test_l2_matches_direct_norms():
    g = torch.Generator().manual_seed(0)
    f, t = torch.randn(5, 8, generator=g, dtype=F64), torch.randn(8, generator=g, dtype=F64)
    want = sum(math.sqrt(sum((a - b) ** 2 for a, b in zip(row, t.tolist()))) for row in f.tolist()) / 5
    assert adversarial_loss(f, t, "l2").item() == pytest.approx(want, abs=1e-12)


def test_cosine_antipodal_is_two():
    f_t = torch.randn(128, dtype=F64)
    assert adversarial_loss(-f_t.expand(3, 128).clone(), f_t, "cosine").item() == pytest.approx(2.0, abs=1e-12)


def test_cosine_zero_vector_errors():
    with pytest.raises(ValueError):
        adversarial_loss(torch.zeros(2, 4), torch.ones(4), "cosine")


def brute_infonce(f, t, tau):
    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))

    total = 0.0
    for i, a in enumerate(f):
        terms = [math.exp(cos(a, t) / tau)] + [math.exp(cos(a, f[j]) / tau) for j in range(len(f)) if j != i]
        total += -math.log(terms[0] / sum(terms))
    return total / len(f)


def test_infonce_matches_brute_force():
    g = torch.Generator().manual_seed(3)
    f, t = torch.randn(3, 128, generator=g, dtype=F64), torch.randn(128, generator=g, dtype=F64)
    assert adversarial_loss(f, t, "infonce", 0.5).item() == pytest.approx(
        brute_infonce(f.tolist(), t.tolist(), 0.5), abs=1e-12)


def test_unknown_criterion_and_shape():
    with pytest.raises(ValueError):
        adversarial_loss(torch.ones(2, 4), torch.ones(4), "kl")
    with pytest.raises(dc.ShapeError):
        adversarial_loss(torch.ones(2, 4), torch.ones(5))


def test_consistency_examples():
    x = torch.rand(2, 3, 4, 4)
    assert consistency_loss(x, x).item() == 0.0
    a = torch.zeros(1, 3, 1, 1)
    b = a.clone()
    b[0, 1, 0, 0] = 0.3
    assert consistency_loss(b, a).item() == pytest.approx(0.3, abs=1e-7)
    with pytest.raises(dc.ShapeError):
        consistency_loss(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 3))


def test_consistency_random_pair_direct_oracle():
    rng = np.random.default_rng(5)
    xa, x = rng.random((4, 3, 8, 8)), rng.random((4, 3, 8, 8))
    want = np.mean(np.sqrt(((xa - x) ** 2).reshape(4, -1).sum(axis=1)))
    assert abs(consistency_loss(torch.tensor(xa), torch.tensor(x)).item() - want) <= 1e-6


# ---------------------------------------------------------------- DAEs


def test_zero_generator_is_identity():
    gen = init_params(GENERATOR_ARCH, 0)
    gen = gen.with_tensors({k: torch.zeros_like(v) for k, v in gen.tensors.items()})
    x = torch.rand(3, 3, 32, 32)
    assert torch.equal(make_dae(gen, x, EPS), x)


def test_all_ones_stays_saturated():
    gen = init_params(GENERATOR_ARCH, 0)
    x = torch.ones(2, 3, 32, 32)
    delta = generator_forward(gen, x, EPS)
    out = make_dae(gen, x, EPS)
    assert torch.all(out[delta > 0] == 1.0)
    assert float(out.min()) >= 1.0 - EPS32


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.1])
def test_make_dae_rejects_eps(eps):
    with pytest.raises(ValueError):
        make_dae(init_params(GENERATOR_ARCH, 0), torch.rand(1, 3, 32, 32), eps)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32), st.floats(1 / 255, 32 / 255), st.floats(0.5, 8.0))
def test_budget_holds_for_arbitrary_generators(seed, eps, scale):
    gen = init_params(GENERATOR_ARCH, seed)
    gen = gen.with_tensors({k: v * scale for k, v in gen.tensors.items()})
    x = torch.rand(4, 3, 32, 32, generator=torch.Generator().manual_seed(seed % 1000))
    out = make_dae(gen, x, eps)
    assert float((out - x).abs().max()) <= eps + 1e-6
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_fixed_noise_dae_budget():
    delta = init_fixed_noise(EPS, 3) * 3  # deliberately over budget; emission must clamp
    x = torch.rand(10, 3, 32, 32)
    out = generate_daes(delta, x, EPS)
    assert float((out - x).abs().max()) <= EPS + 1e-6


def test_alpha_parsing():
    assert parse_alpha("inf") == math.inf and alpha_label(math.inf) == "inf"
    assert parse_alpha(2) == 2.0 and alpha_label(2.0) == "2"


@pytest.mark.parametrize("kw", [{"alpha": -1.0}, {"eps": 0.0}, {"eps": 1.0}, {"eta": 0.0}, {"criterion": "kl"},
                                {"epochs": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AttackConfig(threat_image=torch.zeros(3, 32, 32), **kw)


# ---------------------------------------------------------------- training


def test_generator_training_contracts(small):
    data, enc, threat = small
    before = dumps(enc.tensors, {})
    cfg = _cfg(threat)
    gen, hist = train_generator(enc, cfg, data)
    assert dumps(enc.tensors, {}) == before  # frozen encoder untouched
    for loss, adv, con in hist["steps"]:
        assert abs(loss - (cfg.alpha * adv + con)) <= 1e-6
    assert len(hist["epoch_feature_distance"]) == 2
    gen2, hist2 = train_generator(enc, cfg, data)
    assert dumps(gen.tensors, {}) == dumps(gen2.tensors, {})
    assert hist == hist2


def test_example_specific_perturbations(small):
    data, enc, threat = small
    gen, _ = train_generator(enc, _cfg(threat, epochs=1), data)
    imgs = gen_shapes10(7, "test", 100).images
    delta = (generate_daes(gen, imgs, EPS) - imgs).reshape(100, -1).double()
    d = torch.cdist(delta, delta)
    iu = torch.triu_indices(100, 100, 1)
    assert float((d[iu[0], iu[1]] > 1e-6).double().mean()) > 0.99


def test_alpha_zero_shrinks_perturbation(small):
    data, enc, threat = small
    init = init_params(GENERATOR_ARCH, 0)
    x = data.images
    before = consistency_loss(generate_daes(init, x, EPS), x).item()
    gen, _ = train_generator(enc, _cfg(threat, alpha=0.0, lr=1e-3, epochs=3), data)
    after = consistency_loss(generate_daes(gen, x, EPS), x).item()
    assert after < before


def test_alpha_infinity_drops_consistency_term(small):
    data, enc, threat = small
    _, hist = train_generator(enc, _cfg(threat, alpha=math.inf, epochs=1), data)
    for loss, adv, _ in hist["steps"]:
        assert loss == adv


def test_fixed_noise_training(small):
    data, enc, threat = small
    delta, hist = train_fixed_noise(enc, _cfg(threat, lr=1e-2), data)
    assert delta.shape == (3, 32, 32)
    assert float(delta.abs().max()) <= EPS32
    shrunk, _ = train_fixed_noise(enc, _cfg(threat, alpha=0.0, lr=1e-3, epochs=3), data)
    assert float(shrunk.norm()) < float(init_fixed_noise(EPS, 0).norm())


def test_divergence_raises_with_last_good(small):
    data, enc, threat = small
    bad = enc.with_tensors({k: v.clone() for k, v in enc.tensors.items()})
    bad.tensors["conv4.bias"][0] = float("nan")
    with pytest.raises(AttackDiverged) as err:
        train_generator(bad, _cfg(threat, epochs=1), data)
    assert err.value.last_good is not None


# ---------------------------------------------------------------- alignment


def test_alignment_replicated_threat(small):
    _, enc, threat = small
    d, frac = check_alignment(enc, threat.expand(5, 3, 32, 32).clone(), threat, 1e-9)
    assert torch.all(d == 0) and frac == 1.0


def test_alignment_infinite_eta_and_median(small):
    data, enc, threat = small
    gen, _ = train_generator(enc, _cfg(threat, epochs=1), data)
    x_adv = generate_daes(gen, data.images, EPS)
    d, frac = check_alignment(enc, x_adv, threat, math.inf)
    assert frac == 1.0
    _, frac = check_alignment(enc, x_adv, threat, float(d.median()))
    assert frac == pytest.approx(0.5, abs=1 / len(d))
    with pytest.raises(ValueError):
        check_alignment(enc, x_adv, threat, 0.0)
