"""Audio file I/O, resampling, dataset manifests and train/validation splits."""
from __future__ import annotations

import csv
import json
import wave
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

# Column order of the confusion matrices; alphabetical, FSDKaggle2019 spelling.
LABELS: tuple[str, ...] = (
    "Accordion",
    "Acoustic_guitar",
    "Bass_drum",
    "Bass_guitar",
    "Electric_guitar",
    "Female_singing",
    "Glockenspiel",
    "Gong",
    "Harmonica",
    "Hi-hat",
    "Male_singing",
    "Marimba_and_xylophone",
)

TARGET_RATE = 16000
RESAMPLER_TAPS = 64
KAISER_BETA = 8.6


class AudioFormatError(ValueError):
    """Raised for unreadable, non-PCM or empty audio files."""


@dataclass
class Waveform:
    """Mono audio signal.

    ``samples`` is a float64 vector, nominally in [-1, 1]. Perturbed signals
    (x + delta) may leave that range; they are clipped only on export.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate)


def load_wav(path) -> Waveform:
    """Read a PCM WAV file (8/16/24/32-bit) and mix it down to mono."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    except OSError as exc:
        raise AudioFormatError(f"{path}: cannot read ({exc})") from exc

    if width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        data = ints.astype(np.float64) / float(1 << 23)
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise AudioFormatError(f"{path}: unsupported sample width {width}")

    if data.size == 0:
        raise AudioFormatError(f"{path}: zero-length audio")
    data = data[: data.size - data.size % n_channels].reshape(-1, n_channels)
    return Waveform(data.mean(axis=1), rate)


def save_wav(w: Waveform, path) -> None:
    """Write ``w`` as 16-bit mono PCM, clipping to [-1, 1] first."""
    samples = np.asarray(w.samples, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise ValueError("cannot save non-finite samples")
    ints = np.clip(np.round(np.clip(samples, -1.0, 1.0) * 32768.0), -32768, 32767)
    path = Path(path)
    try:
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(int(w.sample_rate))
            fh.writeframes(ints.astype("<i2").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _polyphase_filter(up: int, down: int) -> np.ndarray:
    # RESAMPLER_TAPS taps per polyphase branch, cutoff at the lower Nyquist.
    # Unit DC gain; resample_poly applies the factor ``up`` itself.
    n_taps = RESAMPLER_TAPS * up
    return signal.firwin(n_taps + 1, 1.0 / max(up, down), window=("kaiser", KAISER_BETA))


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited (Kaiser windowed-sinc, polyphase) sample-rate conversion.

    The output has ``round(len(w) * target_rate / w.sample_rate)`` samples.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = gcd(target_rate, w.sample_rate)
    up, down = target_rate // g, w.sample_rate // g
    out = signal.resample_poly(w.samples, up, down, window=_polyphase_filter(up, down))
    n_out = max(1, int(round(len(w) * target_rate / w.sample_rate)))
    if out.size < n_out:
        out = np.pad(out, (0, n_out - out.size))
    return Waveform(out[:n_out], target_rate)


def _canonical_label(name: str) -> str:
    return name.strip().replace(" ", "_")


@dataclass
class DatasetManifest:
    """Audio files with one label each, drawn from ``label_set``."""

    entries: list[tuple[str, str]]
    label_set: tuple[str, ...] = LABELS
    root: Path | None = None

    def __post_init__(self):
        self.label_set = tuple(self.label_set)
        if len(set(self.label_set)) != len(self.label_set):
            raise ValueError("label set contains duplicates")
        known = set(self.label_set)
        for fname, label in self.entries:
            if label not in known:
                raise ValueError(f"entry {fname!r} has unknown label {label!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def label_index(self, i: int) -> int:
        return self.label_set.index(self.entries[i][1])

    @property
    def labels(self) -> np.ndarray:
        lookup = {name: k for k, name in enumerate(self.label_set)}
        return np.array([lookup[label] for _, label in self.entries], dtype=np.int64)

    def path(self, i: int) -> Path:
        fname = Path(self.entries[i][0])
        return fname if self.root is None else Path(self.root) / fname

    def load(self, i: int, target_rate: int | None = TARGET_RATE) -> Waveform:
        w = load_wav(self.path(i))
        if target_rate is not None and w.sample_rate != target_rate:
            w = resample(w, target_rate)
        return w


def read_manifest(path, audio_dir=None, label_set: Sequence[str] = LABELS) -> DatasetManifest:
    """Read a ``fname,label`` CSV.

    An FSDKaggle2019-style ``labels`` column is accepted as well; rows carrying
    more than one label or a label outside ``label_set`` are skipped there.
    """
    path = Path(path)
    wanted = set(label_set)
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "fname" not in reader.fieldnames:
            raise ValueError(f"{path}: manifest needs a 'fname' column")
        if "label" in reader.fieldnames:
            for row in reader:
                entries.append((row["fname"], _canonical_label(row["label"])))
        elif "labels" in reader.fieldnames:
            for row in reader:
                labels = [_canonical_label(s) for s in row["labels"].split(",")]
                if len(labels) == 1 and labels[0] in wanted:
                    entries.append((row["fname"], labels[0]))
        else:
            raise ValueError(f"{path}: manifest needs a 'label' column")
    root = Path(audio_dir) if audio_dir is not None else path.parent
    return DatasetManifest(entries, tuple(label_set), root)


def write_manifest(m: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fname", "label"])
        writer.writerows(m.entries)


@dataclass
class Split:
    train: list[int]
    validation: list[int]
    seed: int = 0

    def to_dict(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation), "seed": self.seed}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Split":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([int(i) for i in d["train"]], [int(i) for i in d["validation"]], int(d["seed"]))


def split_dataset(m: DatasetManifest, train_count: int, seed: int) -> Split:
    """Random (unstratified) partition into ``train_count`` training entries."""
    n = len(m)
    if not 0 < train_count < n:
        raise ValueError(f"train_count must lie in (0, {n}), got {train_count}")
    order = np.random.default_rng(seed).permutation(n)
    return Split(sorted(order[:train_count].tolist()), sorted(order[train_count:].tolist()), seed)
