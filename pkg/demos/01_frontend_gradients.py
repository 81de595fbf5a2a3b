"""Waveform -> normalized log-mel, and the hand-written gradient back to samples."""
# %%
import numpy as np

from advaudio.frontend import FrontendConfig, backward_frontend, forward_frontend, mel_edges

cfg = FrontendConfig()
t = np.arange(16000) / 16000
x = 0.4 * np.sin(2 * np.pi * 440 * t) + 0.05 * np.random.default_rng(0).standard_normal(t.size)

spec, tape = forward_frontend(x, cfg)
print("log-mel shape (bands, frames):", spec.shape)
centers = mel_edges(cfg.n_mels, cfg.f_min, cfg.f_max)[1:-1]
print("loudest band centre: %.0f Hz" % centers[spec[:, 10].argmax()])

# %% directional derivative against central differences
rng = np.random.default_rng(1)
G = rng.standard_normal(spec.shape)
v = rng.standard_normal(x.size)
analytic = backward_frontend(tape, G) @ v
h = 1e-4
numeric = (np.sum(G * forward_frontend(x + h * v, cfg)[0]) - np.sum(G * forward_frontend(x - h * v, cfg)[0])) / (2 * h)
print("analytic %.6f  numeric %.6f  rel err %.1e" % (analytic, numeric, abs(analytic - numeric) / abs(numeric)))
