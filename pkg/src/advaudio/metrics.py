"""SNR, adversarial accuracy, confusion matrices and cross-run aggregation."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

N_CLASSES = 12


def snr_db(x, delta) -> float:
    """``10 log10(sum x^2 / sum delta^2)``; ``math.inf`` when delta is all zero."""
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    delta = np.asarray(getattr(delta, "samples", delta), dtype=np.float64)
    if x.shape != delta.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {delta.shape}")
    signal_energy = float(np.dot(x, x))
    if signal_energy == 0.0:
        raise ValueError("SNR undefined for a silent signal")
    noise_energy = float(np.dot(delta, delta))
    if noise_energy == 0.0:
        return math.inf
    return 10.0 * math.log10(signal_energy / noise_energy)


def adversarial_accuracy(model, dataset, results) -> float:
    """Accuracy on ``x + delta`` where an attack succeeded, on ``x`` otherwise.

    Predictions are recomputed with the model rather than read from the
    results.
    """
    from .classifier import predict

    if len(dataset) != len(results):
        raise ValueError(f"{len(dataset)} samples but {len(results)} results")
    correct = 0
    for (w, y), r in zip(dataset, results):
        samples = np.asarray(getattr(w, "samples", w), dtype=np.float64)
        if r is not None and r.success:
            samples = samples + r.delta
        correct += predict(model, samples).class_index == int(y)
    return correct / len(dataset)


@dataclass
class ConfusionMatrix:
    """Counts indexed ``[prediction, ground_truth]``."""

    counts: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        totals = self.counts.sum(axis=0, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path, labels: Sequence[str] | None = None, normalized: bool = False) -> None:
        m = self.normalized if normalized else self.counts
        n = m.shape[0]
        labels = list(labels) if labels is not None else [str(i) for i in range(n)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["prediction\\truth"] + labels)
            for i in range(n):
                writer.writerow([labels[i]] + [repr(float(v)) if normalized else int(v) for v in m[i]])

    def plot(self, path, labels: Sequence[str] | None = None, title: str = "") -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        n = self.counts.shape[0]
        labels = list(labels) if labels is not None else [str(i) for i in range(n)]
        fig, ax = plt.subplots(figsize=(6.5, 6))
        im = ax.imshow(self.normalized, vmin=0, vmax=1, cmap="viridis")
        ax.set_xticks(range(n), labels, rotation=90, fontsize=7)
        ax.set_yticks(range(n), labels, fontsize=7)
        ax.set_xlabel("ground truth")
        ax.set_ylabel("prediction")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def confusion(predictions, labels, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    for arr in (predictions, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"class index outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (predictions, labels), 1)
    return ConfusionMatrix(counts)


@dataclass
class NoiseBaselineResult:
    accuracy: float
    n_evaluated: int
    skipped: list[int] = field(default_factory=list)
    achieved_snr_db: list[float] = field(default_factory=list, repr=False)


def white_noise_baseline(model, dataset, target_snr_db: float, seed: int = 0) -> NoiseBaselineResult:
    """Accuracy after adding Gaussian noise scaled to exactly ``target_snr_db`` per clip."""
    from .classifier import predict

    if math.isnan(target_snr_db):
        raise ValueError("target SNR must not be NaN")
    correct, evaluated, skipped, achieved = 0, 0, [], []
    for i, (w, y) in enumerate(dataset):
        x = np.asarray(getattr(w, "samples", w), dtype=np.float64)
        energy = float(np.dot(x, x))
        if energy == 0.0:
            skipped.append(i)
            continue
        if math.isinf(target_snr_db) and target_snr_db > 0:
            noisy = x
            achieved.append(math.inf)
        else:
            noise = np.random.default_rng([seed, i]).standard_normal(x.size)
            noise *= math.sqrt(energy / (float(np.dot(noise, noise)) * 10.0 ** (target_snr_db / 10.0)))
            noisy = x + noise
            achieved.append(snr_db(x, noise))
        correct += predict(model, noisy).class_index == int(y)
        evaluated += 1
    if evaluated == 0:
        raise ValueError("no non-silent samples to evaluate")
    return NoiseBaselineResult(correct / evaluated, evaluated, skipped, achieved)


@dataclass
class RunStats:
    """One attack run over a dataset."""

    n_samples: int
    n_success: int
    accuracy: float
    mean_snr_db: float | None
    median_iterations: float | None
    mean_confidence: float | None


def run_stats(results) -> RunStats:
    """Statistics of one run.

    ``results`` holds one AttackResult (or None when the sample was not
    attacked) per evaluated sample. Accuracy uses the adversarial prediction
    for successes and the clean prediction otherwise; SNR, iterations and
    confidence only cover successes, and SNR skips zero perturbations.
    """
    results = list(results)
    if not results:
        raise ValueError("empty run")
    correct = 0
    snrs, iters, confs = [], [], []
    for r in results:
        if r is None:
            continue
        pred = r.adversarial_prediction if r.success else r.original_prediction
        correct += pred.class_index == r.label
        if r.success:
            iters.append(r.iterations_used)
            confs.append(r.adversarial_prediction.confidence)
            if r.snr_db is not None and math.isfinite(r.snr_db):
                snrs.append(r.snr_db)
    n_attacked = sum(r is not None for r in results)
    return RunStats(
        n_samples=n_attacked,
        n_success=len(iters),
        accuracy=correct / max(n_attacked, 1),
        mean_snr_db=float(np.mean(snrs)) if snrs else None,
        median_iterations=float(np.median(iters)) if iters else None,
        mean_confidence=float(np.mean(confs)) if confs else None,
    )


@dataclass
class AggregateStats:
    """Mean and population std over runs of every per-run statistic."""

    n_runs: int
    n_success: float
    n_success_std: float
    accuracy: float
    accuracy_std: float
    mean_snr_db: float | None
    mean_snr_db_std: float | None
    median_iterations: float | None
    median_iterations_std: float | None
    mean_confidence: float | None
    mean_confidence_std: float | None
    runs: list[RunStats] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateStats":
        d = dict(d)
        d["runs"] = [RunStats(**r) for r in d.get("runs", [])]
        return cls(**d)


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def aggregate(runs: Sequence) -> AggregateStats:
    """Combine runs (each a RunStats or a sequence of AttackResults)."""
    if len(runs) == 0:
        raise ValueError("aggregate needs at least one run")
    stats = [r if isinstance(r, RunStats) else run_stats(r) for r in runs]
    n_s, n_s_std = _mean_std([s.n_success for s in stats])
    acc, acc_std = _mean_std([s.accuracy for s in stats])
    snr, snr_std = _mean_std([s.mean_snr_db for s in stats])
    it, it_std = _mean_std([s.median_iterations for s in stats])
    conf, conf_std = _mean_std([s.mean_confidence for s in stats])
    return AggregateStats(len(stats), n_s, n_s_std, acc, acc_std, snr, snr_std, it, it_std, conf, conf_std, stats)


def majority_baseline(labels) -> float:
    """Accuracy of always predicting the most frequent class."""
    labels = np.asarray(labels, dtype=np.int64)
    return float(np.bincount(labels).max() / labels.size)
