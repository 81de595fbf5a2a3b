"""Waveform -> normalized log-mel spectrogram, with a hand-written backward pass.

Spectrograms are plain ``(n_mels, n_frames)`` float64 arrays throughout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .audio_io import Waveform
from .spectral import STFTTape, frame_count, stft, stft_backward

LOG10_SCALE = 10.0 / np.log(10.0)


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    fft_size: int = 2048
    hop: int = 512
    n_mels: int = 100
    f_min: float = 40.0
    f_max: float = 8000.0
    db_floor: float = 1e-10
    norm_mean: np.ndarray | None = field(default=None, compare=False)
    norm_std: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate / 2")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError("need 0 < hop <= fft_size")
        if self.db_floor <= 0:
            raise ValueError("db_floor must be positive")
        for name in ("norm_mean", "norm_std"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.float64).reshape(-1)
                if value.size != self.n_mels:
                    raise ValueError(f"{name} must have {self.n_mels} entries")
                object.__setattr__(self, name, value)
        if self.norm_std is not None and np.any(self.norm_std <= 0):
            raise ValueError("norm_std entries must be positive")

    @property
    def mean(self) -> np.ndarray:
        return np.zeros(self.n_mels) if self.norm_mean is None else self.norm_mean

    @property
    def std(self) -> np.ndarray:
        return np.ones(self.n_mels) if self.norm_std is None else self.norm_std

    def with_stats(self, mean, std) -> "FrontendConfig":
        return replace(self, norm_mean=np.asarray(mean, float), norm_std=np.asarray(std, float))

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in ("sample_rate", "fft_size", "hop", "n_mels", "f_min", "f_max", "db_floor")
        }
        d["norm_mean"] = None if self.norm_mean is None else self.norm_mean.tolist()
        d["norm_std"] = None if self.norm_std is None else self.norm_std.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        f >= min_log_hz,
        min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
        f / f_sp,
    )


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_edges(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """``n_mels + 2`` band edges in Hz; entries 1..n_mels are the band centers."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """Triangular filters without area normalization, shape ``(n_mels, fft_size//2 + 1)``."""
    freqs = np.linspace(0.0, sample_rate / 2, fft_size // 2 + 1)
    edges = mel_edges(n_mels, f_min, f_max)
    widths = np.diff(edges)
    ramps = edges[:, None] - freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb.setflags(write=False)
    return fb


def _filterbank(cfg: FrontendConfig) -> np.ndarray:
    return mel_filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels, float(cfg.f_min), float(cfg.f_max))


@dataclass
class FrontendTape:
    stft_tape: STFTTape
    spectrum: np.ndarray  # complex STFT, (n_frames, n_bins)
    mel_power: np.ndarray  # (n_mels, n_frames)
    cfg: FrontendConfig


def _samples(w) -> np.ndarray:
    return np.asarray(getattr(w, "samples", w), dtype=np.float64)


def log_mel(w, cfg: FrontendConfig) -> np.ndarray:
    """Un-normalized dB mel spectrogram."""
    X, _ = stft(_samples(w), cfg.fft_size, cfg.hop)
    S = _filterbank(cfg) @ (X.real**2 + X.imag**2).T
    return LOG10_SCALE * np.log(np.maximum(S, cfg.db_floor))


def forward_frontend(w, cfg: FrontendConfig) -> tuple[np.ndarray, FrontendTape]:
    """Power STFT -> mel -> dB -> per-band standardization.

    Returns the ``(n_mels, n_frames)`` spectrogram and the tape needed by
    :func:`backward_frontend`.
    """
    x = _samples(w)
    if x.size < 1:
        raise ValueError("empty waveform")
    X, tape = stft(x, cfg.fft_size, cfg.hop)
    S = _filterbank(cfg) @ (X.real**2 + X.imag**2).T
    db = LOG10_SCALE * np.log(np.maximum(S, cfg.db_floor))
    out = (db - cfg.mean[:, None]) / cfg.std[:, None]
    return out, FrontendTape(tape, X, S, cfg)


def backward_frontend(tape: FrontendTape, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``<grad_out, forward_frontend(w)>`` with respect to ``w``."""
    cfg = tape.cfg
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != tape.mel_power.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != {tape.mel_power.shape}")
    g_db = grad_out / cfg.std[:, None]
    S = tape.mel_power
    live = S > cfg.db_floor
    g_S = np.where(live, g_db * LOG10_SCALE / np.where(live, S, 1.0), 0.0)
    g_P = (_filterbank(cfg).T @ g_S).T  # (n_frames, n_bins)
    return stft_backward(tape.stft_tape, 2.0 * g_P * tape.spectrum)


def n_frames_for(n_samples: int, cfg: FrontendConfig) -> int:
    return frame_count(n_samples, cfg.fft_size, cfg.hop)


def pad_repeat(spec: np.ndarray, target_frames: int) -> np.ndarray:
    """Lengthen ``spec`` to ``target_frames`` by cyclic repetition on both sides.

    The original stays contiguous; ``ceil(d/2)`` frames go before it and
    ``floor(d/2)`` after, with ``d`` the shortfall.
    """
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    n = spec.shape[-1]
    if n >= target_frames:
        return spec
    before = (target_frames - n + 1) // 2
    idx = (np.arange(target_frames) - before) % n
    return spec[..., idx]


def pad_repeat_index(n_frames: int, target_frames: int) -> np.ndarray:
    """Source frame for every output frame of :func:`pad_repeat`."""
    if n_frames >= target_frames:
        return np.arange(n_frames)
    before = (target_frames - n_frames + 1) // 2
    return (np.arange(target_frames) - before) % n_frames


def window_starts(n_frames: int, window_len: int = 116) -> list[int]:
    """Offsets of half-overlapping windows; the last one is right-aligned."""
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    if n_frames <= window_len:
        return [0]
    stride = max(1, window_len // 2)
    starts = list(range(0, n_frames - window_len + 1, stride))
    if starts[-1] + window_len < n_frames:
        starts.append(n_frames - window_len)
    return starts


def extract_windows(spec: np.ndarray, window_len: int = 116) -> list[np.ndarray]:
    n = spec.shape[-1]
    if n < window_len:
        return [pad_repeat(spec, window_len)]
    return [spec[..., s : s + window_len] for s in window_starts(n, window_len)]


def fit_normalization(train_waveforms, cfg: FrontendConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean and (population) std of dB values pooled over all frames.

    Clips are merged one at a time (pairwise mean/M2 update), so memory use
    does not grow with the training set.
    """
    count = 0
    mean = np.zeros(cfg.n_mels)
    m2 = np.zeros(cfg.n_mels)
    for w in train_waveforms:
        db = log_mel(w, cfg)
        n_b = db.shape[1]
        mean_b = db.mean(axis=1)
        m2_b = ((db - mean_b[:, None]) ** 2).sum(axis=1)
        delta = mean_b - mean
        total = count + n_b
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta**2 * (count * n_b / total)
        count = total
    if count == 0:
        raise ValueError("fit_normalization needs at least one training clip")
    std = np.maximum(np.sqrt(m2 / count), 1e-8)
    return mean, std
