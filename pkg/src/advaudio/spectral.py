"""Differentiable STFT primitives and the multi-scale spectral distance.

All routines work in float64. Gradients are propagated by hand: a real
loss ``L`` that depends on complex STFT coefficients ``X = a + ib`` is
summarised by the cotangent ``C = dL/da + i dL/db``; :func:`stft_backward`
maps that cotangent back onto the time-domain signal.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

MULTISCALE_FFT_SIZES = (2048, 1024, 512, 256, 128, 64)
MAG_FLOOR = 1e-5
REDUCTIONS = ("sum", "mean")


@lru_cache(maxsize=32)
def hann(n: int) -> np.ndarray:
    """Periodic Hann window of length ``n`` (read-only)."""
    w = get_window("hann", n, fftbins=True).astype(np.float64)
    w.setflags(write=False)
    return w


def frame_count(n_samples: int, fft_size: int, hop: int) -> int:
    """Number of centered STFT frames (``fft_size // 2`` reflect padding per side)."""
    pad = fft_size // 2
    return 1 + (n_samples + 2 * pad - fft_size) // hop


@lru_cache(maxsize=64)
def _frame_index(n_samples: int, fft_size: int, hop: int) -> np.ndarray:
    # Index of the original sample behind every (frame, tap) of the
    # reflect-padded signal; frame extraction is then a plain gather.
    pad = fft_size // 2
    base = np.arange(n_samples)
    if n_samples > 1:
        padded = np.pad(base, pad, mode="reflect")
    else:
        padded = np.zeros(n_samples + 2 * pad, dtype=base.dtype)
    idx = sliding_window_view(padded, fft_size)[::hop]
    idx = np.ascontiguousarray(idx)
    idx.setflags(write=False)
    return idx


@dataclass
class STFTTape:
    """What :func:`stft_backward` needs from a forward :func:`stft` call."""

    n_samples: int
    fft_size: int
    hop: int


def stft(x: np.ndarray, fft_size: int, hop: int) -> tuple[np.ndarray, STFTTape]:
    """Centered, Hann-windowed STFT.

    Returns complex coefficients of shape ``(n_frames, fft_size // 2 + 1)``.
    """
    x = np.asarray(x, dtype=np.float64)
    idx = _frame_index(x.size, fft_size, hop)
    frames = x[idx] * hann(fft_size)
    return np.fft.rfft(frames, axis=1), STFTTape(x.size, fft_size, hop)


def stft_backward(tape: STFTTape, cotangent: np.ndarray) -> np.ndarray:
    """Pull a complex cotangent on the STFT back to the time signal."""
    n = tape.fft_size
    # d a_k + i d b_k = sum_t e^{-2 pi i k t / n} w_t dx_t  ->  Re(sum_k C_k e^{+...})
    g_frames = np.fft.ifft(cotangent, n=n, axis=1).real * n
    g_frames *= hann(n)
    idx = _frame_index(tape.n_samples, n, tape.hop)
    return np.bincount(idx.ravel(), weights=g_frames.ravel(), minlength=tape.n_samples)


def magnitude_cotangent(X: np.ndarray, mag: np.ndarray, grad_mag: np.ndarray) -> np.ndarray:
    """Cotangent of ``|X|`` given ``dL/d|X|``; zero subgradient where ``|X| = 0``."""
    safe = np.where(mag > 0, mag, 1.0)
    return np.where(mag > 0, grad_mag / safe, 0.0) * X


class MultiScaleReference:
    """Magnitude spectra of a fixed reference signal at every scale.

    Attacks compare many candidates against one clean signal, so the
    reference side is computed once.
    """

    def __init__(self, x, fft_sizes=MULTISCALE_FFT_SIZES, mag_floor: float = MAG_FLOOR, reduction: str = "sum"):
        if reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")
        self.reduction = reduction
        self.x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
        self.fft_sizes = tuple(int(n) for n in fft_sizes)
        self.mag_floor = float(mag_floor)
        self._ref = []
        for n_fft in self.fft_sizes:
            X, _ = stft(self.x, n_fft, max(1, n_fft // 4))
            mag = np.abs(X)
            self._ref.append((mag, np.log(np.maximum(mag, self.mag_floor))))

    def __call__(self, y, need_grad: bool = True) -> tuple[float, np.ndarray | None]:
        y = np.asarray(getattr(y, "samples", y), dtype=np.float64)
        if y.shape != self.x.shape:
            raise ValueError(f"length mismatch: {self.x.shape} vs {y.shape}")
        total = 0.0
        grad = np.zeros_like(y) if need_grad else None
        for n_fft, (mx, lx) in zip(self.fft_sizes, self._ref):
            Y, tape = stft(y, n_fft, max(1, n_fft // 4))
            my = np.abs(Y)
            ly = np.log(np.maximum(my, self.mag_floor))
            scale = 1.0 / my.size if self.reduction == "mean" else 1.0
            total += scale * (np.abs(mx - my).sum() + np.abs(lx - ly).sum())
            if need_grad:
                # log clamp: no gradient where |Y| sits at the floor
                g_log = np.where(my > self.mag_floor, np.sign(ly - lx) / np.maximum(my, self.mag_floor), 0.0)
                g_mag = scale * (np.sign(my - mx) + g_log)
                grad += stft_backward(tape, magnitude_cotangent(Y, my, g_mag))
        return float(total), grad


def multi_scale_spectral_loss(
    x,
    x_adv,
    fft_sizes=MULTISCALE_FFT_SIZES,
    mag_floor: float = MAG_FLOOR,
    need_grad: bool = True,
    reduction: str = "sum",
) -> tuple[float, np.ndarray | None]:
    """L1 distance of magnitude and log-magnitude spectra over several FFT sizes.

    Parameters
    ----------
    x, x_adv : array-like or Waveform
        Reference and perturbed signals of equal length.
    fft_sizes : sequence of int
        One Hann-windowed centered STFT with hop ``fft_size // 4`` per entry.
    mag_floor : float
        Magnitudes are clamped below at this value before the log.
    reduction : {"sum", "mean"}
        ``"sum"`` adds up absolute differences (plain L1 norms); ``"mean"``
        divides each scale's two terms by its number of STFT bins.

    Returns
    -------
    loss : float
    grad : ndarray or None
        Gradient with respect to ``x_adv``.
    """
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    y = np.asarray(getattr(x_adv, "samples", x_adv), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    return MultiScaleReference(x, fft_sizes, mag_floor, reduction)(y, need_grad=need_grad)
