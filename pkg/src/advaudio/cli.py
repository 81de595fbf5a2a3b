"""``advaudio`` command line: prepare, synth, train, attack, grid, target-all, noise-baseline, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import attacks, harness
from .audio_io import LABELS, TARGET_RATE, DatasetManifest, Split, read_manifest, save_wav, split_dataset, write_manifest
from .classifier import ClassifierModel, TrainConfig, evaluate, fit, load_checkpoint, predict, save_checkpoint
from .frontend import FrontendConfig, fit_normalization
from .metrics import white_noise_baseline
from .synthetic import make_synthetic_dataset

log = logging.getLogger("advaudio")


def _floats(values, default):
    return [float(v) for v in values] if values else list(default)


def _add_data_args(p, split=True):
    p.add_argument("--manifest", required=True, help="CSV with fname,label columns")
    p.add_argument("--audio-dir", help="directory holding the WAV files (default: manifest's directory)")
    if split:
        p.add_argument("--split", help="split JSON; validation indices are used")


def _add_grid_args(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=attacks.METHODS, required=True)
    p.add_argument("--lambda", dest="lambdas", type=float, action="append")
    p.add_argument("--epsilon", dest="epsilons", type=float, action="append")
    p.add_argument("--eta", dest="etas", type=float, action="append")
    p.add_argument("--alpha", dest="alphas", type=float, action="append")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seed", type=int, action="append", help="run seeds (default 0..runs-1)")
    p.add_argument("--min-success-frac", type=float, default=0.75)
    p.add_argument("--out-dir", required=True)


def _spec_from_args(args) -> harness.ExperimentSpec:
    return harness.ExperimentSpec(
        method=args.method,
        checkpoint=args.checkpoint,
        manifest=args.manifest,
        audio_dir=args.audio_dir,
        split=args.split,
        lambdas=_floats(args.lambdas, harness.DEFAULT_GRID["lambda"]),
        epsilons=_floats(args.epsilons, harness.DEFAULT_GRID["epsilon"]),
        etas=_floats(args.etas, harness.DEFAULT_GRID["eta"]),
        alphas=_floats(args.alphas, harness.DEFAULT_GRID["alpha"]),
        n_runs=args.runs,
        seeds=args.seed,
        min_success_frac=args.min_success_frac,
        max_iters=args.max_iters,
    )


def _progress(cfg, stats, elapsed):
    log.info("%s %s seed=%d: %d/%d successes, acc %.3f (%.1fs)", cfg.method, cfg.grid_key(), cfg.seed,
             stats.n_success, stats.n_samples, stats.accuracy, elapsed)


def cmd_prepare(args):
    """Filter a FSDKaggle2019-style CSV to single-label entries, resample to 16 kHz, split."""
    manifest = read_manifest(args.manifest, args.audio_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (fname, label) in enumerate(manifest.entries):
        w = manifest.load(i, target_rate=TARGET_RATE)
        name = Path(fname).name
        save_wav(w, out / name)
        entries.append((name, label))
    prepared = DatasetManifest(entries, LABELS, out)
    write_manifest(prepared, out / "manifest.csv")
    split = split_dataset(prepared, args.train_count or round(0.75 * len(prepared)), args.seed)
    split.save(out / "split.json")
    print(f"{len(entries)} files -> {out} (train {len(split.train)}, validation {len(split.validation)})")


def cmd_synth(args):
    m = make_synthetic_dataset(args.n_per_class, args.seed, args.out_dir)
    split = split_dataset(m, int(round(args.train_frac * len(m))), args.seed)
    split.save(Path(args.out_dir) / "split.json")
    print(f"{len(m)} clips in {args.out_dir}; train {len(split.train)}, validation {len(split.validation)}")


def cmd_train(args):
    manifest = read_manifest(args.manifest, args.audio_dir)
    if args.split:
        split = Split.load(args.split)
    else:
        split = split_dataset(manifest, args.train_count, args.seed)
    labels = manifest.labels
    train = [(manifest.load(i), int(labels[i])) for i in split.train]
    val = [(manifest.load(i), int(labels[i])) for i in split.validation]
    frontend = FrontendConfig()
    frontend = frontend.with_stats(*fit_normalization([w for w, _ in train], frontend))
    widths = tuple(int(v) for v in args.widths.split(","))
    model = ClassifierModel(widths, dropout=args.dropout, seed=args.seed, frontend=frontend)
    cfg = TrainConfig(args.lr, args.epochs, args.batch_size, min(args.decay_epoch, args.epochs), args.decay_factor,
                      args.seed, args.dropout)
    out = Path(args.checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".log.jsonl")
    log_path.unlink(missing_ok=True)
    fit(model, train, cfg, frontend, val_data=val, log_path=log_path,
        progress=lambda e: log.info("epoch %(epoch)d loss %(train_loss).4f val %(val_accuracy).3f", e))
    save_checkpoint(model, out)
    res = evaluate(model, val)
    print(json.dumps({"val_accuracy": res.accuracy, "mean_confidence": res.mean_confidence, "checkpoint": str(out)}))


def cmd_attack(args):
    """Attack a single WAV file and export the adversarial example."""
    from .audio_io import load_wav, resample

    model = load_checkpoint(args.checkpoint)
    w = load_wav(args.input)
    if w.sample_rate != model.frontend.sample_rate:
        w = resample(w, model.frontend.sample_rate)
    label = LABELS.index(args.label) if args.label else predict(model, w).class_index
    cfg = attacks.AttackConfig(args.method, lam=(args.lambdas or [1e-3])[0], epsilon=(args.epsilons or [5e-4])[0],
                               eta=(args.etas or [1e-5])[0], alpha=(args.alphas or [15.0])[0],
                               max_iters=args.max_iters, seed=(args.seed or [0])[0])
    target = None
    if cfg.targeted:
        target = LABELS.index(args.target) if args.target else attacks.sample_target(
            predict(model, w).class_index, len(LABELS), cfg.seed)
    result = attacks.run_attack(model, w, label, cfg, target=target)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clip_id = Path(args.input).stem
    (out / f"{clip_id}.{cfg.method}.json").write_text(result.to_json(), encoding="utf-8")
    save_wav(w.with_samples(w.samples + result.delta), out / f"{clip_id}.{cfg.method}.adv.wav")
    print(json.dumps(result.to_dict(include_delta=False)))


def cmd_grid(args):
    spec = _spec_from_args(args)
    report = harness.run_grid_search(spec, progress=_progress)
    harness.emit_report(report, args.out_dir)
    print(harness.markdown_table(report))


def cmd_target_all(args):
    spec = _spec_from_args(args)
    report = harness.run_all_to_target(spec, args.target, progress=_progress)
    harness.emit_report(report, args.out_dir)
    print(harness.markdown_table(report))
    print(json.dumps(report.extra["per_point"], indent=1))


def cmd_noise_baseline(args):
    spec = harness.ExperimentSpec("fgsm", args.checkpoint, args.manifest, args.audio_dir, args.split)
    model = load_checkpoint(args.checkpoint)
    data = harness.load_validation(spec)
    clean = evaluate(model, data).accuracy
    res = white_noise_baseline(model, data, args.snr, args.seed[0] if args.seed else 0)
    print(json.dumps({"clean_accuracy": clean, "noisy_accuracy": res.accuracy, "snr_db": args.snr,
                      "n_evaluated": res.n_evaluated, "skipped": res.skipped}))


def cmd_report(args):
    report = harness.load_report(args.report)
    files = harness.emit_report(report, args.out_dir)
    print(harness.markdown_table(report))
    log.info("wrote %s", ", ".join(str(p) for p in files.values()))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advaudio", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="resample and filter a labelled WAV collection")
    _add_data_args(p, split=False)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-count", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate the synthetic 12-instrument dataset")
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit normalization stats and train the CNN")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--train-count", type=int, default=599)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--decay-epoch", type=int, default=90)
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--widths", default="64,128,256,256")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack one WAV file")
    p.add_argument("--input", required=True)
    p.add_argument("--label", choices=LABELS)
    p.add_argument("--target", choices=LABELS)
    _add_grid_args(p)
    p.set_defaults(func=cmd_attack)

    for name, func, helptext in (("grid", cmd_grid, "grid search with success-threshold selection"),
                                 ("target-all", cmd_target_all, "push every sample to one target class")):
        p = sub.add_parser(name, help=helptext)
        _add_data_args(p)
        _add_grid_args(p)
        if name == "target-all":
            p.add_argument("--target", choices=LABELS, default="Accordion")
        p.set_defaults(func=func)

    p = sub.add_parser("noise-baseline", help="accuracy under white noise at a fixed SNR")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snr", type=float, required=True)
    p.add_argument("--seed", type=int, action="append")
    p.set_defaults(func=cmd_noise_baseline)

    p = sub.add_parser("report", help="re-render a saved report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
