"""Desk-scale stand-in for the 12-instrument dataset.

Every label has a fixed timbre recipe (partial layout, envelope, noise,
modulation); per-clip randomness only moves pitch, duration, level and
recipe details within class-specific ranges.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal

from .audio_io import LABELS, TARGET_RATE, DatasetManifest, Waveform, save_wav, write_manifest

SR = TARGET_RATE


def _t(n):
    return np.arange(n) / SR


def _adsr(n, attack, decay_rate, sustain=0.0):
    t = _t(n)
    a = np.clip(t / max(attack, 1e-4), 0.0, 1.0)
    return a * (sustain + (1.0 - sustain) * np.exp(-decay_rate * t))


def _harmonics(n, f0, amps, phase_rng, inharm=0.0, vibrato=None):
    t = _t(n)
    if vibrato is not None:
        rate, depth = vibrato
        inst = f0 * (1.0 + depth * np.sin(2 * np.pi * rate * t))
        phase = 2 * np.pi * np.cumsum(inst) / SR
    else:
        phase = 2 * np.pi * f0 * t
    out = np.zeros(n)
    for k, a in enumerate(amps, start=1):
        ratio = k * np.sqrt(1.0 + inharm * k * k)
        if f0 * ratio >= SR / 2 - 200:
            break
        out += a * np.sin(ratio * phase + phase_rng.uniform(0, 2 * np.pi))
    return out


def _formant_amps(f0, formants, n_harm):
    amps = []
    for k in range(1, n_harm + 1):
        f = k * f0
        amps.append(sum(g / (1.0 + ((f - fc) / bw) ** 2) for fc, bw, g in formants) + 0.02)
    return np.array(amps)


def _accordion(n, rng):
    f0 = rng.uniform(150, 500)
    amps = 1.0 / np.arange(1, 25)
    # two slightly detuned reeds -> beating
    x = _harmonics(n, f0, amps, rng) + _harmonics(n, f0 * 1.004, amps, rng)
    tremolo = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(4, 7) * _t(n))
    return x * tremolo * _adsr(n, 0.08, 0.0, 1.0)


def _repeated_notes(n, rng, period_range, note):
    out = np.zeros(n)
    period = int(rng.uniform(*period_range) * SR)
    for s in range(0, n, period):
        out[s:] += note(n - s)
    return out


def _acoustic_guitar(n, rng):
    f0 = rng.uniform(110, 440)
    amps = 1.0 / np.arange(1, 20) ** 1.8
    decay = rng.uniform(2.5, 4.0)
    return _repeated_notes(
        n, rng, (0.4, 0.7),
        lambda m: _harmonics(m, f0 * rng.choice([1.0, 1.26, 1.5]), amps, rng, inharm=1e-4) * _adsr(m, 0.003, decay),
    )


def _bass_drum(n, rng):
    t = _t(n)
    f_start, f_end = rng.uniform(120, 180), rng.uniform(40, 60)
    inst = f_end + (f_start - f_end) * np.exp(-t * 25)
    body = np.sin(2 * np.pi * np.cumsum(inst) / SR) * np.exp(-t * rng.uniform(6, 10))
    click = rng.standard_normal(n) * np.exp(-t * 300) * 0.3
    hits = np.zeros(n)
    period = int(rng.uniform(0.45, 0.7) * SR)
    for s in range(0, n, period):
        hits[s:] += (body + click)[: n - s]
    return hits


def _bass_guitar(n, rng):
    f0 = rng.uniform(41, 98)
    amps = 1.0 / np.arange(1, 14) ** 1.2
    decay = rng.uniform(1.0, 2.0)
    return _repeated_notes(
        n, rng, (0.5, 0.8),
        lambda m: _harmonics(m, f0 * rng.choice([1.0, 1.335, 1.5]), amps, rng, inharm=5e-5) * _adsr(m, 0.01, decay),
    )


def _electric_guitar(n, rng):
    f0 = rng.uniform(150, 500)
    amps = 1.0 / np.arange(1, 12)
    x = _harmonics(n, f0, amps, rng, vibrato=(rng.uniform(4, 6), 0.004))
    drive = rng.uniform(4, 8)
    return np.tanh(drive * x) * _adsr(n, 0.005, 0.3, 0.6)


def _female_singing(n, rng):
    f0 = rng.uniform(220, 440)
    formants = [(rng.uniform(700, 900), 120, 1.0), (rng.uniform(1100, 1400), 150, 0.6), (2900, 200, 0.25)]
    amps = _formant_amps(f0, formants, 30)
    return _harmonics(n, f0, amps, rng, vibrato=(rng.uniform(5, 6.5), 0.015)) * _adsr(n, 0.12, 0.0, 1.0)


def _glockenspiel(n, rng):
    t = _t(n)
    f0 = rng.uniform(800, 1800)
    out = np.zeros(n)
    period = int(rng.uniform(0.3, 0.6) * SR)
    for s in range(0, n, period):
        f = f0 * rng.choice([1.0, 1.25, 1.5])
        note = sum(a * np.sin(2 * np.pi * f * r * t[: n - s]) * np.exp(-t[: n - s] * d)
                   for r, a, d in ((1.0, 1.0, 2.0), (2.76, 0.4, 6.0), (5.40, 0.2, 12.0)))
        out[s:] += note
    return out


def _gong(n, rng):
    t = _t(n)
    f0 = rng.uniform(60, 120)
    ratios = np.sort(rng.uniform(1.0, 12.0, 40))
    out = np.zeros(n)
    for r in ratios:
        out += np.sin(2 * np.pi * f0 * r * t + rng.uniform(0, 2 * np.pi)) / r**0.5
    swell = (1 - np.exp(-t * 3)) * np.exp(-t * 0.4)
    return out * swell


def _harmonica(n, rng):
    f0 = rng.uniform(300, 900)
    amps = np.array([1.0 / k if k % 2 else 0.08 / k for k in range(1, 16)])
    breath = signal.lfilter(*signal.butter(2, [f0 / (SR / 2), min(0.95, 3 * f0 / (SR / 2))], "band"), rng.standard_normal(n))
    x = _harmonics(n, f0, amps, rng) + 0.05 * breath / (np.std(breath) + 1e-9)
    return x * _adsr(n, 0.05, 0.0, 1.0)


def _hi_hat(n, rng):
    b, a = signal.butter(4, rng.uniform(6000, 7000) / (SR / 2), "high")
    noise = signal.lfilter(b, a, rng.standard_normal(n))
    env = np.zeros(n)
    period = int(rng.uniform(0.12, 0.25) * SR)
    decay = rng.uniform(25, 60)
    t = _t(n)
    for s in range(0, n, period):
        env[s:] += np.exp(-t[: n - s] * decay)
    return noise * env


def _male_singing(n, rng):
    f0 = rng.uniform(90, 180)
    formants = [(rng.uniform(500, 650), 100, 1.0), (rng.uniform(900, 1100), 120, 0.7), (2500, 200, 0.3)]
    amps = _formant_amps(f0, formants, 60)
    return _harmonics(n, f0, amps, rng, vibrato=(rng.uniform(4.5, 6), 0.012)) * _adsr(n, 0.1, 0.0, 1.0)


def _marimba(n, rng):
    t = _t(n)
    f0 = rng.uniform(200, 800)
    out = np.zeros(n)
    period = int(rng.uniform(0.2, 0.4) * SR)
    for s in range(0, n, period):
        f = f0 * rng.choice([1.0, 1.122, 1.26, 1.335])
        tt = t[: n - s]
        out[s:] += (np.sin(2 * np.pi * f * tt) + 0.3 * np.sin(2 * np.pi * 4 * f * tt) * np.exp(-tt * 20)) * np.exp(-tt * 9)
    return out


RECIPES = (
    _accordion, _acoustic_guitar, _bass_drum, _bass_guitar, _electric_guitar, _female_singing,
    _glockenspiel, _gong, _harmonica, _hi_hat, _male_singing, _marimba,
)


def synth_clip(label: int, rng: np.random.Generator, min_dur=1.0, max_dur=3.0) -> Waveform:
    n = int(rng.uniform(min_dur, max_dur) * SR)
    x = RECIPES[label](n, rng)
    x = x + rng.standard_normal(n) * 10 ** rng.uniform(-4, -3)
    x = x / (np.max(np.abs(x)) + 1e-12) * rng.uniform(0.3, 0.8)
    return Waveform(x, SR)


def make_synthetic_dataset(n_per_class: int, seed: int, out_dir=None) -> DatasetManifest:
    """Generate ``12 * n_per_class`` clips (1-3 s at 16 kHz).

    With ``out_dir`` the clips are written as WAV files together with a
    ``manifest.csv``. Same seed -> byte-identical files.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    entries = []
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
    for label, name in enumerate(LABELS):
        for i in range(n_per_class):
            fname = f"{name}_{i:04d}.wav"
            entries.append((fname, name))
            if root is not None:
                rng = np.random.default_rng([seed, label, i])
                save_wav(synth_clip(label, rng), root / fname)
    manifest = DatasetManifest(entries, LABELS, root)
    if root is not None:
        write_manifest(manifest, root / "manifest.csv")
    return manifest


def synthetic_clips(n_per_class: int, seed: int) -> list[tuple[Waveform, int]]:
    """In-memory variant of :func:`make_synthetic_dataset` (same signals, unquantized)."""
    return [
        (synth_clip(label, np.random.default_rng([seed, label, i])), label)
        for label in range(len(LABELS))
        for i in range(n_per_class)
    ]
