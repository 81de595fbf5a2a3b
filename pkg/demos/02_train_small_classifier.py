"""Train a small CNN on a few synthetic instrument clips and checkpoint it."""
# %%
import sys
import time

from advaudio.classifier import ClassifierModel, TrainConfig, evaluate, fit, save_checkpoint
from advaudio.frontend import FrontendConfig, fit_normalization
from advaudio.synthetic import synthetic_clips

out = sys.argv[1] if len(sys.argv) > 1 else "small.ckpt"
clips = synthetic_clips(6, seed=0)
train, val = clips[::2], clips[1::2]

# normalization statistics come from the training clips only
fe = FrontendConfig()
fe = fe.with_stats(*fit_normalization([w for w, _ in train], fe))

# %%
model = ClassifierModel((16, 32, 32, 32), seed=0, frontend=fe)
t0 = time.perf_counter()
fit(model, train, TrainConfig(epochs=15, decay_epoch=10, batch_size=8, seed=0), fe, val_data=val,
    progress=lambda e: print("epoch %(epoch)2d  loss %(train_loss).3f  val %(val_accuracy).3f" % e))
print("trained in %.0f s" % (time.perf_counter() - t0))
res = evaluate(model, val)
print("validation accuracy %.3f, mean confidence %.3f" % (res.accuracy, res.mean_confidence))
save_checkpoint(model, out)
print("saved", out)
