"""Run FGSM, PGDn, CW and MSCW on one clip and compare SNR and iterations.

Usage: python 03_four_attacks.py small.ckpt   (checkpoint from 02_train_small_classifier.py)
"""
# %%
import sys

from advaudio.attacks import AttackConfig, run_attack, sample_target
from advaudio.audio_io import LABELS
from advaudio.classifier import load_checkpoint, predict
from advaudio.synthetic import synthetic_clips

model = load_checkpoint(sys.argv[1] if len(sys.argv) > 1 else "small.ckpt")
w, y = synthetic_clips(1, seed=42)[3]
clean = predict(model, w)
print("truth %s, predicted %s (%.2f)" % (LABELS[y], LABELS[clean.class_index], clean.confidence))
target = sample_target(clean.class_index, len(LABELS), seed=0, sample_id=0)
print("random target for the targeted attacks:", LABELS[target])

# %%
configs = [
    AttackConfig("fgsm", lam=5e-3),
    AttackConfig("pgdn", epsilon=5e-3, eta=5e-4),
    AttackConfig("cw", epsilon=1e-2, eta=5e-4, alpha=15),
    AttackConfig("mscw", epsilon=1e-2, eta=5e-4, alpha=15),
]
for cfg in configs:
    r = run_attack(model, w, y, cfg, target=target if cfg.targeted else None)
    snr = "-" if r.snr_db is None else "%.1f dB" % r.snr_db
    print("%-5s success=%-5s iterations=%3d  SNR %-8s  -> %s (%.2f)" % (
        cfg.method, r.success, r.iterations_used, snr,
        LABELS[r.adversarial_prediction.class_index], r.adversarial_prediction.confidence))
