"""A miniature grid search with threshold selection, written out as a report.

Usage: python 04_grid_report.py small.ckpt out_dir
"""
# %%
import sys

from advaudio.classifier import load_checkpoint
from advaudio.harness import ExperimentSpec, emit_report, markdown_table, run_grid_search
from advaudio.metrics import white_noise_baseline
from advaudio.synthetic import synthetic_clips

model = load_checkpoint(sys.argv[1] if len(sys.argv) > 1 else "small.ckpt")
out = sys.argv[2] if len(sys.argv) > 2 else "grid_report"
val = synthetic_clips(6, seed=0)[1::2]

# two PGDn points, two seeds; the point with the best SNR among those
# reaching 75% success is selected
spec = ExperimentSpec("pgdn", epsilons=[1e-3, 5e-3], etas=[5e-4], n_runs=2, max_iters=100)
report = run_grid_search(spec, model, val)
print(markdown_table(report))
for kind, path in emit_report(report, out).items():
    print("%-18s %s" % (kind, path))

# %% the same SNR as white noise, for comparison (the synthetic clips are very
# clean, so noise above their floor hurts more than it would on recordings)
point = report.selected_point
if point is not None and point.stats.mean_snr_db is not None:
    noisy = white_noise_baseline(model, val, point.stats.mean_snr_db)
    print("clean %.3f, white noise at %.1f dB: %.3f" % (report.clean["accuracy"], point.stats.mean_snr_db, noisy.accuracy))
