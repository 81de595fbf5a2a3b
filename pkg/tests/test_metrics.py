import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advaudio.audio_io import LABELS, Waveform
from advaudio.attacks import AttackResult
from advaudio.classifier import ClassifierModel, Prediction, predict
from advaudio.metrics import (
    RunStats,
    adversarial_accuracy,
    aggregate,
    confusion,
    majority_baseline,
    run_stats,
    snr_db,
    white_noise_baseline,
)

GONG = LABELS.index("Gong")


def _sig(seed=0, n=4000):
    return np.random.default_rng(seed).uniform(-0.5, 0.5, n)


def test_snr_reference_values():
    x = _sig()
    assert snr_db(x, x / 10) == pytest.approx(20.0, abs=1e-12)
    assert snr_db(x, x) == pytest.approx(0.0, abs=1e-12)
    assert snr_db(x, np.zeros_like(x)) == math.inf
    with pytest.raises(ValueError):
        snr_db(np.zeros(10), np.ones(10))
    with pytest.raises(ValueError):
        snr_db(x, x[:-1])
    assert snr_db(Waveform(x, 16000), x / 100) == pytest.approx(40.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 1e3), st.integers(0, 1000))
def test_snr_of_scaled_copy(c, seed):
    x = _sig(seed, 500)
    assert snr_db(x, c * x) == pytest.approx(-20 * math.log10(c), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(1.01, 10.0))
def test_snr_decreases_as_perturbation_grows(seed, k):
    x = _sig(seed, 300)
    d = np.random.default_rng(seed + 1).standard_normal(300) * 1e-2
    assert snr_db(x, k * d) < snr_db(x, d)


def test_confusion_hand_count():
    cm = confusion([0, 1, 1], [0, 1, 2], n_classes=3)
    expected = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 0]])
    assert np.array_equal(cm.counts, expected)
    assert cm.total == 3
    with pytest.raises(ValueError):
        confusion([0, 3], [0, 1], n_classes=3)
    with pytest.raises(ValueError):
        confusion([0], [0, 1])


def test_confusion_perfect_is_diagonal():
    y = np.arange(12).repeat(3)
    cm = confusion(y, y)
    assert np.array_equal(cm.counts, 3 * np.eye(12, dtype=int))
    assert np.array_equal(cm.normalized, np.eye(12))


def test_confusion_constant_gong_predictor():
    labels = [GONG] * 2 + [0, 1, 2, 3, 4, 5]
    cm = confusion([GONG] * 8, labels)
    # everything lands in the Gong prediction row
    assert cm.counts[GONG].sum() == 8
    assert cm.counts.sum(axis=1).tolist().count(0) == 11
    norm = cm.normalized
    present = sorted(set(labels))
    assert np.allclose(norm[:, present].sum(axis=0), 1.0)
    assert np.all(norm[:, [k for k in range(12) if k not in present]] == 0)
    assert np.trace(cm.counts) / cm.total == 0.25


def test_confusion_files(tmp_path):
    cm = confusion([0, 1, 1, 2], [0, 1, 2, 2], n_classes=3)
    cm.to_csv(tmp_path / "c.csv", ["a", "b", "c"])
    cm.to_csv(tmp_path / "n.csv", ["a", "b", "c"], normalized=True)
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["prediction\\truth", "a", "b", "c"]
    assert [int(v) for v in rows[2][1:]] == [0, 1, 1]
    nrows = list(csv.reader(open(tmp_path / "n.csv")))
    assert [float(v) for v in nrows[2][1:]] == [0.0, 1.0, 0.5]
    cm.plot(tmp_path / "c.png", ["a", "b", "c"], title="t")
    assert (tmp_path / "c.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_white_noise_is_exactly_at_target_snr(tiny_model, tiny_data):
    _, val = tiny_data
    res = white_noise_baseline(tiny_model, val, 25.0, seed=1)
    assert res.n_evaluated == len(val) and not res.skipped
    assert np.allclose(res.achieved_snr_db, 25.0, atol=1e-9)
    again = white_noise_baseline(tiny_model, val, 25.0, seed=1)
    assert again.accuracy == res.accuracy and again.achieved_snr_db == res.achieved_snr_db
    clean = white_noise_baseline(tiny_model, val, math.inf)
    assert clean.accuracy == np.mean([predict(tiny_model, w).class_index == y for w, y in val])


def test_white_noise_skips_silence(tiny_model):
    data = [(np.zeros(3000), 0), (_sig(1, 3000), 1)]
    res = white_noise_baseline(tiny_model, data, 10.0)
    assert res.skipped == [0] and res.n_evaluated == 1
    with pytest.raises(ValueError):
        white_noise_baseline(tiny_model, data[:1], 10.0)
    with pytest.raises(ValueError):
        white_noise_baseline(tiny_model, data, float("nan"))


def _stats(n_success):
    return RunStats(20, n_success, 0.5, 30.0, 10.0, 0.9)


def test_aggregate_population_std():
    agg = aggregate([_stats(v) for v in (15, 16, 16, 16, 16)])
    assert agg.n_success == pytest.approx(15.8)
    assert agg.n_success_std == pytest.approx(0.4)
    assert agg.n_runs == 5
    single = aggregate([_stats(12)])
    assert single.n_success == 12 and single.n_success_std == 0.0
    with pytest.raises(ValueError):
        aggregate([])
    back = type(agg).from_dict(agg.to_dict())
    assert back == agg


def _pred(k):
    p = np.full(12, 0.01)
    p[k] = 1 - 0.11
    return Prediction(k, float(p[k]), p)


def _result(label, clean, adv, success, delta, x):
    return AttackResult("pgdn", label, success, delta, 3 if success else 500,
                        snr_db(x, delta) if success else None, _pred(clean), _pred(adv))


def test_run_stats_counts_successes_only():
    x = _sig(2, 100)
    d = np.full(100, 1e-3)
    results = [
        _result(0, 0, 5, True, d, x),
        _result(1, 1, 1, False, np.zeros(100), x),
        _result(2, 3, 3, False, np.zeros(100), x),
        _result(3, 4, 4, True, np.zeros(100), x),  # already wrong: zero perturbation
        None,
    ]
    s = run_stats(results)
    assert s.n_samples == 4 and s.n_success == 2
    assert s.accuracy == 0.25
    # the zero perturbation has infinite SNR and is left out of the mean
    assert s.mean_snr_db == pytest.approx(snr_db(x, d))
    assert s.median_iterations == 3.0


def test_adversarial_accuracy_recomputes_predictions():
    m = ClassifierModel((4, 8, 8, 8), seed=0)
    m.layers[-2].params["bias"][2] = 1e3
    x = _sig(3, 3000)
    data = [(x, 2), (x, 2), (x, 5)]
    fake = _result(2, 2, 7, True, np.zeros(3000), x)
    # the stored adversarial prediction claims 7, but the model still says 2
    assert adversarial_accuracy(m, data, [fake, None, None]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        adversarial_accuracy(m, data, [None])


def test_majority_baseline():
    assert majority_baseline([GONG] * 25 + list(range(7)) * 25) == pytest.approx(1 / 8)
    assert majority_baseline([3, 3, 3]) == 1.0
