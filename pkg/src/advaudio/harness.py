"""Experiment orchestration: grid search, the all-to-one targeted run, reports."""
from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, AttackResult, cw, ms_cw, pgdn, run_attack, sample_target
from .audio_io import LABELS, DatasetManifest, Split, Waveform, read_manifest
from .classifier import ClassifierModel, load_checkpoint, predict
from .metrics import AggregateStats, aggregate, confusion, majority_baseline, run_stats

DEFAULT_GRID = {
    "lambda": [1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2],
    "epsilon": [1e-4, 5e-4, 1e-3, 5e-3, 1e-2],
    "eta": [1e-5, 5e-5, 1e-4, 5e-4],
    "alpha": [1.0, 5.0, 15.0, 50.0],
}


def worker_count() -> int:
    env = os.environ.get("ADVAUDIO_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class ExperimentSpec:
    method: str
    checkpoint: str | None = None
    manifest: str | None = None
    audio_dir: str | None = None
    split: str | None = None
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_GRID["lambda"]))
    epsilons: list[float] = field(default_factory=lambda: list(DEFAULT_GRID["epsilon"]))
    etas: list[float] = field(default_factory=lambda: list(DEFAULT_GRID["eta"]))
    alphas: list[float] = field(default_factory=lambda: list(DEFAULT_GRID["alpha"]))
    n_runs: int = 5
    seeds: list[int] | None = None
    min_success_frac: float = 0.75
    max_iters: int = 500

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if not 0 <= self.min_success_frac <= 1:
            raise ValueError("min_success_frac must lie in [0, 1]")

    def run_seeds(self) -> list[int]:
        if self.method == "fgsm":
            return [0]  # deterministic, nothing to vary
        return list(self.seeds) if self.seeds is not None else list(range(self.n_runs))

    def grid(self) -> list[AttackConfig]:
        m = self.method
        if m == "fgsm":
            points = [dict(lam=v) for v in self.lambdas]
        elif m == "pgdn":
            points = [dict(epsilon=e, eta=h) for e, h in itertools.product(self.epsilons, self.etas)]
        else:
            points = [dict(alpha=a, epsilon=e, eta=h)
                      for a, e, h in itertools.product(self.alphas, self.epsilons, self.etas)]
        if not points:
            raise ValueError("empty grid")
        return [AttackConfig(m, max_iters=self.max_iters, **p) for p in points]

    def threshold(self, n_samples: int) -> int:
        return int(math.ceil(self.min_success_frac * n_samples - 1e-9))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class GridPoint:
    config: AttackConfig
    stats: AggregateStats

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "stats": self.stats.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "GridPoint":
        return cls(AttackConfig.from_dict(d["config"]), AggregateStats.from_dict(d["stats"]))


@dataclass
class ExperimentReport:
    method: str
    n_samples: int
    threshold: int
    points: list[GridPoint]
    selected: int | None
    clean: dict
    confusion_counts: list[list[int]] | None = None
    extra: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def selected_point(self) -> GridPoint | None:
        return None if self.selected is None else self.points[self.selected]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n_samples": self.n_samples,
            "threshold": self.threshold,
            "points": [p.to_dict() for p in self.points],
            "selected": self.selected,
            "clean": self.clean,
            "confusion_counts": self.confusion_counts,
            "extra": self.extra,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["method"], d["n_samples"], d["threshold"], [GridPoint.from_dict(p) for p in d["points"]],
                   d["selected"], d["clean"], d.get("confusion_counts"), d.get("extra", {}), d.get("metadata", {}))


def select_point(points: Sequence[GridPoint], threshold: int) -> int | None:
    """Index of the highest-mean-SNR point with at least ``threshold`` mean successes.

    Ties go to the smaller median iteration count. Points whose successes
    all carry zero perturbation (no finite SNR) are ranked last.
    """
    best, best_key = None, None
    for i, p in enumerate(points):
        if p.stats.n_success < threshold:
            continue
        snr = p.stats.mean_snr_db if p.stats.mean_snr_db is not None else -math.inf
        iters = p.stats.median_iterations if p.stats.median_iterations is not None else math.inf
        key = (snr, -iters)
        if best_key is None or key > best_key:
            best, best_key = i, key
    return best


def file_digest(path) -> str | None:
    if path is None or not Path(path).exists():
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_validation(spec: ExperimentSpec) -> list[tuple[Waveform, int]]:
    manifest = read_manifest(spec.manifest, spec.audio_dir)
    split = Split.load(spec.split) if spec.split else None
    indices = split.validation if split else range(len(manifest))
    labels = manifest.labels
    return [(manifest.load(i), int(labels[i])) for i in indices]


def _pmap(fn, items, threads: int | None = None):
    threads = worker_count() if threads is None else threads
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def clean_predictions(model: ClassifierModel, dataset, threads=None):
    return _pmap(lambda item: predict(model, item[0]), dataset, threads)


def attack_dataset(model, dataset, cfg: AttackConfig, targets=None, threads=None) -> list[AttackResult | None]:
    """Attack every sample; ``targets[i] is None`` skips sample ``i`` for targeted methods."""
    def one(i):
        w, y = dataset[i]
        if cfg.targeted:
            t = targets[i]
            if t is None:
                return None
            return run_attack(model, w, y, cfg, target=t, sample_id=i)
        return run_attack(model, w, y, cfg, sample_id=i)

    return _pmap(one, range(len(dataset)), threads)


def random_targets(clean_preds, seed: int, n_classes: int = len(LABELS)) -> list[int]:
    return [sample_target(p.class_index, n_classes, seed, i) for i, p in enumerate(clean_preds)]


def _clean_summary(clean_preds, dataset) -> dict:
    labels = [int(y) for _, y in dataset]
    acc = float(np.mean([p.class_index == y for p, y in zip(clean_preds, labels)]))
    return {
        "accuracy": acc,
        "mean_confidence": float(np.mean([p.confidence for p in clean_preds])),
        "majority_baseline": majority_baseline(labels),
        "confusion_counts": confusion([p.class_index for p in clean_preds], labels).counts.tolist(),
    }


def _final_predictions(results, clean_preds):
    out = []
    for r, p in zip(results, clean_preds):
        if r is not None and r.success:
            out.append(r.adversarial_prediction.class_index)
        else:
            out.append(p.class_index)
    return out


def run_grid_search(
    spec: ExperimentSpec,
    model: ClassifierModel | None = None,
    dataset: Sequence[tuple[Waveform, int]] | None = None,
    threads: int | None = None,
    progress=None,
) -> ExperimentReport:
    """Attack every validation sample at every grid point and seed, then select.

    Random targets for the targeted methods are drawn once per seed and
    reused at all grid points.
    """
    if model is None:
        if spec.checkpoint is None or not Path(spec.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {spec.checkpoint}")
        model = load_checkpoint(spec.checkpoint)
    if dataset is None:
        dataset = load_validation(spec)
    grid = spec.grid()
    seeds = spec.run_seeds()
    n = len(dataset)
    threshold = spec.threshold(n)
    if threshold > n:
        raise ValueError("success threshold exceeds dataset size")
    clean = clean_predictions(model, dataset, threads)
    targets = {s: random_targets(clean, s) for s in seeds} if grid[0].targeted else {}
    labels = [int(y) for _, y in dataset]

    points, first_run_preds = [], []
    for cfg0 in grid:
        runs = []
        for s in seeds:
            cfg = replace(cfg0, seed=s)
            t0 = time.perf_counter()
            results = attack_dataset(model, dataset, cfg, targets.get(s), threads)
            runs.append(run_stats(results))
            if s == seeds[0]:
                first_run_preds.append(_final_predictions(results, clean))
            if progress:
                progress(cfg, runs[-1], time.perf_counter() - t0)
        points.append(GridPoint(cfg0, aggregate(runs)))
    sel = select_point(points, threshold)
    report = ExperimentReport(
        method=spec.method,
        n_samples=n,
        threshold=threshold,
        points=points,
        selected=sel,
        clean=_clean_summary(clean, dataset),
        confusion_counts=None if sel is None else confusion(first_run_preds[sel], labels).counts.tolist(),
        metadata={
            "spec": spec.to_dict(),
            "seeds": seeds,
            "checkpoint_sha256": file_digest(spec.checkpoint),
            "labels": list(LABELS),
            "snr_definition": "10*log10(sum(x^2)/sum(delta^2)), averaged in dB over successful samples",
        },
    )
    if targets:
        report.metadata["targets"] = {str(s): t for s, t in targets.items()}
    return report


def run_all_to_target(
    spec: ExperimentSpec,
    target_label: str = "Accordion",
    model: ClassifierModel | None = None,
    dataset: Sequence[tuple[Waveform, int]] | None = None,
    threads: int | None = None,
    progress=None,
) -> ExperimentReport:
    """Targeted attacks pushing every sample not already predicted as ``target_label`` to it."""
    if target_label not in LABELS:
        raise ValueError(f"unknown label {target_label!r}")
    if spec.method not in ("cw", "mscw"):
        raise ValueError("all-to-target needs a targeted method (cw or mscw)")
    if model is None:
        if spec.checkpoint is None or not Path(spec.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {spec.checkpoint}")
        model = load_checkpoint(spec.checkpoint)
    if dataset is None:
        dataset = load_validation(spec)
    t = LABELS.index(target_label)
    clean = clean_predictions(model, dataset, threads)
    targets = [None if p.class_index == t else t for p in clean]
    attacked = [i for i, tt in enumerate(targets) if tt is not None]
    threshold = spec.threshold(len(attacked))
    labels = [int(y) for _, y in dataset]

    points, per_point, preds = [], [], []
    for cfg in spec.grid():
        t0 = time.perf_counter()
        results = attack_dataset(model, dataset, cfg, targets, threads)
        stats = run_stats(results)
        if progress:
            progress(cfg, stats, time.perf_counter() - t0)
        points.append(GridPoint(cfg, aggregate([stats])))
        snrs = [r.snr_db for r in results if r is not None and r.success and math.isfinite(r.snr_db)]
        confs = [r.adversarial_prediction.confidence for r in results if r is not None and r.success]
        failed = [i for i, r in enumerate(results) if r is not None and not r.success]
        per_point.append({
            "n_attacked": len(attacked),
            "n_success": stats.n_success,
            "snr_mean": float(np.mean(snrs)) if snrs else None,
            "snr_std": float(np.std(snrs)) if snrs else None,
            "confidence_mean": float(np.mean(confs)) if confs else None,
            "confidence_std": float(np.std(confs)) if confs else None,
            "median_iterations": stats.median_iterations,
            "failed_samples": failed,
            "failed_truths": [LABELS[labels[i]] for i in failed],
        })
        preds.append(_final_predictions(results, clean))
    sel = select_point(points, threshold)
    return ExperimentReport(
        method=spec.method,
        n_samples=len(attacked),
        threshold=threshold,
        points=points,
        selected=sel,
        clean=_clean_summary(clean, dataset),
        confusion_counts=None if sel is None else confusion(preds[sel], labels).counts.tolist(),
        extra={"target": target_label, "excluded": [i for i, tt in enumerate(targets) if tt is None],
               "per_point": per_point},
        metadata={"spec": spec.to_dict(), "checkpoint_sha256": file_digest(spec.checkpoint),
                  "labels": list(LABELS)},
    )


# -- reports ----------------------------------------------------------------
def _fmt(mean, std=None, digits=3):
    if mean is None:
        return "-"
    if std is None or std == 0:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def markdown_table(report: ExperimentReport) -> str:
    lines = [
        f"# {report.method.upper()} attack",
        "",
        f"{report.n_samples} samples; selection threshold {report.threshold} successes.",
        "",
        "| Data Origin | Samples | Accuracy | SNR | Iterations | Confidence |",
        "|---|---|---|---|---|---|",
        f"| clean | {report.n_samples} | {_fmt(report.clean['accuracy'])} | - | - | "
        f"{_fmt(report.clean['mean_confidence'], digits=2)} |",
    ]
    order = [report.selected] if report.selected is not None else []
    order += [i for i in range(len(report.points)) if i != report.selected]
    for i in order:
        p = report.points[i]
        s = p.stats
        name = ", ".join(f"{k}={v:g}" for k, v in p.config.grid_key().items())
        mark = " (selected)" if i == report.selected else ""
        lines.append(
            f"| {report.method} [{name}]{mark} | {_fmt(s.n_success, s.n_success_std, 1)} | "
            f"{_fmt(s.accuracy, s.accuracy_std)} | {_fmt(s.mean_snr_db, s.mean_snr_db_std, 2)} | "
            f"{_fmt(s.median_iterations, s.median_iterations_std, 1)} | "
            f"{_fmt(s.mean_confidence, s.mean_confidence_std, 2)} |"
        )
    if report.selected is None:
        lines += ["", "No grid point reached the success threshold."]
    return "\n".join(lines) + "\n"


def emit_report(report: ExperimentReport, path) -> dict[str, Path]:
    """Write report.json, report.md and confusion CSV/PNG files into directory ``path``."""
    if not report.points:
        raise ValueError("report has no grid points")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {"json": out / "report.json", "markdown": out / "report.md"}
    files["json"].write_text(report.to_json(), encoding="utf-8")
    files["markdown"].write_text(markdown_table(report), encoding="utf-8")
    matrices = {"clean": report.clean.get("confusion_counts")}
    if report.confusion_counts is not None:
        matrices[report.method] = report.confusion_counts
    from .metrics import ConfusionMatrix

    for name, counts in matrices.items():
        if counts is None:
            continue
        cm = ConfusionMatrix(np.asarray(counts, dtype=np.int64))
        files[f"{name}_counts"] = out / f"confusion_{name}_counts.csv"
        files[f"{name}_normalized"] = out / f"confusion_{name}_normalized.csv"
        files[f"{name}_png"] = out / f"confusion_{name}.png"
        cm.to_csv(files[f"{name}_counts"], LABELS)
        cm.to_csv(files[f"{name}_normalized"], LABELS, normalized=True)
        cm.plot(files[f"{name}_png"], LABELS, title=name)
    return files


def load_report(path) -> ExperimentReport:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    return ExperimentReport.from_dict(json.loads(p.read_text(encoding="utf-8")))


# -- per-iteration cost ------------------------------------------------------
def time_per_iteration(model: ClassifierModel, method: str, n_samples: int, n_iters: int = 5,
                       seed: int = 0, repeats: int = 3) -> float:
    """Best-of-``repeats`` wall time of one attack iteration on an ``n_samples`` signal."""
    rng = np.random.default_rng(seed)
    x = 0.3 * rng.standard_normal(n_samples)
    label = predict(model, x).class_index
    target = (label + 1) % model.n_classes
    cfg = AttackConfig(method, lam=1e-3, epsilon=1e-3, eta=1e-4, alpha=1.0, max_iters=n_iters, seed=seed)
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        if method == "pgdn":
            pgdn(model, x, label, cfg, check_success=False)
        elif method == "cw":
            cw(model, x, label, target, cfg, check_success=False)
        elif method == "mscw":
            ms_cw(model, x, label, target, cfg, check_success=False)
        else:
            run_attack(model, x, label, cfg)
        best = min(best, time.perf_counter() - t0)
    return best / (1 if method == "fgsm" else n_iters)
