import json
import math

import numpy as np
import pytest

from advaudio import attacks
from advaudio.attacks import (
    AttackConfig,
    AttackError,
    AttackResult,
    cw,
    cw_total_loss,
    fgsm,
    ms_cw,
    ms_cw_total_loss,
    pgdn,
    run_attack,
    sample_target,
)
from advaudio.classifier import cross_entropy, forward_system, loss_and_input_gradient, predict


@pytest.fixture(scope="module")
def clip(tiny_data, tiny_model):
    """A validation clip the tiny model classifies correctly."""
    _, val = tiny_data
    for w, y in val:
        if predict(tiny_model, w).class_index == y:
            return w, y
    pytest.fail("tiny model gets no validation clip right")


@pytest.fixture(scope="module")
def wrong_clip(tiny_model, clip):
    """A clip the model misclassifies: relabel the correct one."""
    w, y = clip
    return w, (y + 1) % 12


def _other(model, w):
    return (predict(model, w).class_index + 3) % 12


def test_config_validation_and_serialization():
    with pytest.raises(ValueError):
        AttackConfig("deepfool")
    with pytest.raises(ValueError):
        AttackConfig("pgdn", epsilon=-1)
    with pytest.raises(ValueError):
        AttackConfig("cw", eta=0)
    with pytest.raises(ValueError):
        AttackConfig("cw", max_iters=0)
    cfg = AttackConfig("mscw", epsilon=0.01, eta=5e-5, alpha=15, seed=3)
    assert AttackConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.to_dict()["lambda"] == 0.0 and cfg.targeted
    assert cfg.max_iters == 500 == AttackConfig("cw").max_iters


def test_fgsm_zero_lambda(tiny_model, clip, wrong_clip):
    r = fgsm(tiny_model, *clip, AttackConfig("fgsm", lam=0.0))
    assert not r.success and np.all(r.delta == 0)
    r = fgsm(tiny_model, *wrong_clip, AttackConfig("fgsm", lam=0.0))
    assert r.success and np.all(r.delta == 0) and r.iterations_used == 0 and r.snr_db == math.inf


@pytest.mark.parametrize("lam", [1e-4, 1e-3, 5e-2])
def test_fgsm_sign_codomain_and_direction(tiny_model, clip, lam):
    w, y = clip
    r = fgsm(tiny_model, w, y, AttackConfig("fgsm", lam=lam))
    assert set(np.unique(r.delta)) <= {-lam, 0.0, lam}
    assert np.max(np.abs(r.delta)) <= lam
    _, g, _ = loss_and_input_gradient(tiny_model, w, y)
    assert np.array_equal(r.delta, lam * np.sign(g))
    assert r.iterations_used == 1


def test_pgdn_zero_epsilon(tiny_model, clip, wrong_clip):
    r = pgdn(tiny_model, *clip, AttackConfig("pgdn", epsilon=0.0, eta=1e-3, max_iters=20))
    assert not r.success and np.all(r.delta == 0) and r.iterations_used == 20
    r = pgdn(tiny_model, *wrong_clip, AttackConfig("pgdn", epsilon=0.0, eta=1e-3, max_iters=20))
    assert r.success and r.iterations_used == 0 and np.all(r.delta == 0)


def test_pgdn_first_step_is_signed_ascent(tiny_model, clip):
    # Adam's first bias-corrected step equals lr * sign(input) for a sign input
    w, y = clip
    cfg = AttackConfig("pgdn", epsilon=1e-3, eta=1e-4, max_iters=1, seed=4)
    r = pgdn(tiny_model, w, y, cfg, sample_id=9, check_success=False)
    d0 = np.random.default_rng([4, 9]).uniform(-1e-3, 1e-3, len(w))
    logits, tape = forward_system(tiny_model, w.samples + d0)
    _, g_logits = cross_entropy(logits, y)
    from advaudio.classifier import backward_system

    g = backward_system(tiny_model, tape, g_logits)
    expected = np.clip(d0 + 1e-4 * np.sign(g) / (1 + 1e-8), -1e-3, 1e-3)
    assert np.allclose(r.delta, expected, atol=1e-15)


def test_cw_first_step_is_signed_descent_toward_target(tiny_model, clip):
    w, y = clip
    t = _other(tiny_model, w)
    r = cw(tiny_model, w, y, t, AttackConfig("cw", epsilon=1e-3, eta=1e-4, alpha=5.0, max_iters=1),
           check_success=False)
    _, g, _ = loss_and_input_gradient(tiny_model, w, t)
    # at delta = 0 the norm term has zero gradient
    assert np.allclose(r.delta, -1e-4 * np.sign(g) / (1 + 1e-8), atol=1e-15)


@pytest.mark.parametrize("method", ["pgdn", "cw", "mscw"])
@pytest.mark.parametrize("eps", [5e-4, 1e-2])
def test_iterative_bounds_and_reverification(tiny_model, clip, method, eps):
    w, y = clip
    t = _other(tiny_model, w) if method != "pgdn" else None
    cfg = AttackConfig(method, epsilon=eps, eta=5e-4, alpha=15.0, max_iters=60)
    r = run_attack(tiny_model, w, y, cfg, target=t)
    assert np.all(np.abs(r.delta) <= eps)
    assert 0 <= r.iterations_used <= 60
    pred = predict(tiny_model, w.samples + r.delta).class_index
    assert pred == r.adversarial_prediction.class_index
    if r.success:
        assert (pred == t) if t is not None else (pred != y)
        assert r.snr_db is not None


@pytest.mark.parametrize("method", ["pgdn", "cw"])
def test_success_is_first_hit(tiny_model, clip, method):
    w, y = clip
    t = _other(tiny_model, w) if method == "cw" else None
    cfg = AttackConfig(method, epsilon=1e-2, eta=5e-4, alpha=50.0, max_iters=200)
    r = run_attack(tiny_model, w, y, cfg, target=t)
    if not r.success or r.iterations_used == 0:
        pytest.skip("attack did not need any iterations on this clip")
    # same trajectory with one fewer step must not have succeeded yet
    shorter = run_attack(tiny_model, w, y, AttackConfig(method, epsilon=1e-2, eta=5e-4, alpha=50.0,
                                                        max_iters=r.iterations_used - 1), target=t)
    assert not shorter.success
    assert shorter.iterations_used == r.iterations_used - 1


def test_iteration_cap_is_respected(tiny_model, clip):
    w, y = clip
    r = pgdn(tiny_model, w, y, AttackConfig("pgdn", epsilon=1e-7, eta=1e-7))
    assert r.iterations_used <= 500
    if not r.success:
        assert r.iterations_used == 500


def test_targeted_attack_runs_on_misclassified_clip(tiny_model, wrong_clip):
    w, y = wrong_clip
    t = _other(tiny_model, w)
    r = cw(tiny_model, w, y, t, AttackConfig("cw", epsilon=1e-2, eta=5e-4, alpha=50, max_iters=30))
    assert r.iterations_used > 0 or predict(tiny_model, w).class_index == t


def test_target_equal_to_prediction_is_rejected(tiny_model, clip):
    w, y = clip
    p = predict(tiny_model, w).class_index
    with pytest.raises(ValueError):
        cw(tiny_model, w, y, p, AttackConfig("cw", epsilon=1e-3, eta=1e-4))
    with pytest.raises(ValueError):
        ms_cw(tiny_model, w, y, None, AttackConfig("mscw", epsilon=1e-3, eta=1e-4))


def test_total_losses_at_zero_delta(tiny_model, clip):
    w, _ = clip
    t = _other(tiny_model, w)
    ce = cross_entropy(forward_system(tiny_model, w.samples)[0], t)[0]
    zero = np.zeros(len(w))
    assert cw_total_loss(tiny_model, w, zero, t, 7.0) == pytest.approx(7.0 * ce)
    assert ms_cw_total_loss(tiny_model, w, zero, t, 7.0) == pytest.approx(7.0 * ce)
    d = np.full(len(w), 1e-3)
    assert cw_total_loss(tiny_model, w, d, t, 0.0) == pytest.approx(len(w) * 1e-6)


def test_attacks_are_deterministic(tiny_model, clip):
    w, y = clip
    t = _other(tiny_model, w)
    for cfg in (AttackConfig("fgsm", lam=1e-3), AttackConfig("pgdn", epsilon=1e-3, eta=1e-4, max_iters=15, seed=2),
                AttackConfig("cw", epsilon=1e-3, eta=1e-4, alpha=5, max_iters=15),
                AttackConfig("mscw", epsilon=1e-3, eta=1e-4, alpha=5, max_iters=15)):
        a = run_attack(tiny_model, w, y, cfg, target=t, sample_id=5).to_json()
        b = run_attack(tiny_model, w, y, cfg, target=t, sample_id=5).to_json()
        assert a == b


def test_pgdn_seed_changes_start(tiny_model, clip):
    w, y = clip
    cfg = AttackConfig("pgdn", epsilon=1e-3, eta=1e-4, max_iters=1)
    a = pgdn(tiny_model, w, y, cfg, sample_id=0, check_success=False).delta
    b = pgdn(tiny_model, w, y, cfg.__class__(**{**cfg.__dict__, "seed": 1}), sample_id=0, check_success=False).delta
    assert not np.array_equal(a, b)


def test_result_json_round_trip(tiny_model, clip, wrong_clip):
    w, y = clip
    r = pgdn(tiny_model, w, y, AttackConfig("pgdn", epsilon=1e-2, eta=5e-4, max_iters=5))
    back = AttackResult.from_dict(json.loads(r.to_json()))
    assert back.to_json() == r.to_json()
    assert np.array_equal(back.delta, r.delta)
    r0 = fgsm(tiny_model, *wrong_clip, AttackConfig("fgsm", lam=1e-3))
    d = json.loads(r0.to_json())
    assert d["snr_db"] == "inf"
    assert AttackResult.from_dict(d).snr_db == math.inf


def test_non_finite_gradient_raises(tiny_model, clip, monkeypatch):
    w, y = clip
    monkeypatch.setattr(attacks, "backward_system", lambda *a: np.full(len(w), np.nan))
    with pytest.raises(AttackError):
        fgsm(tiny_model, w, y, AttackConfig("fgsm", lam=1e-3))
    with pytest.raises(AttackError):
        cw(tiny_model, w, y, _other(tiny_model, w), AttackConfig("cw", epsilon=1e-3, eta=1e-4, max_iters=3))


def test_sample_target_two_classes():
    assert all(sample_target(0, 2, seed=s, sample_id=i) == 1 for s in range(5) for i in range(50))
    assert all(sample_target(1, 2, seed=s, sample_id=i) == 0 for s in range(5) for i in range(50))
    with pytest.raises(ValueError):
        sample_target(0, 1)


def test_sample_target_is_uniform_over_other_classes():
    draws = np.array([sample_target(4, 12, seed=0, sample_id=i) for i in range(100_000)])
    assert not np.any(draws == 4)
    counts = np.bincount(draws, minlength=12)
    others = np.delete(counts, 4)
    expected = 100_000 / 11
    chi2 = np.sum((others - expected) ** 2 / expected)
    # chi-square with 10 degrees of freedom: mean 10, std sqrt(20)
    assert chi2 < 10 + 3 * math.sqrt(20)
    sigma = math.sqrt(100_000 * (1 / 11) * (10 / 11))
    assert np.all(np.abs(others - expected) < 3 * sigma)


def test_sample_target_deterministic_per_seed_and_id():
    a = [sample_target(p % 12, 12, 3, i) for i, p in enumerate(range(40))]
    assert a == [sample_target(p % 12, 12, 3, i) for i, p in enumerate(range(40))]
    assert a != [sample_target(p % 12, 12, 4, i) for i, p in enumerate(range(40))]
