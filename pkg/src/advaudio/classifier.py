"""Instrument-classification CNN on normalized log-mel input.

The network sees ``(batch, 1, n_mels, frames)`` tensors::

    Conv5x5/2 -> ReLU -> BN -> AvgPool2
    Conv3x3   -> ReLU -> BN -> AvgPool2 -> Dropout
    Conv3x3   -> ReLU -> BN
    Conv3x3   -> ReLU -> BN -> Dropout
    Conv1x1 (n_classes) -> GlobalPool (mean over frequency, max over time)

Convolution padding equals the stride: 2 for the first layer, 1 elsewhere.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio_io import Waveform
from .frontend import (
    FrontendConfig,
    backward_frontend,
    extract_windows,
    forward_frontend,
    pad_repeat,
    pad_repeat_index,
)
from .layers import AvgPool2d, BatchNorm2d, Conv2d, Dropout, GlobalPool, Layer, ReLU, build_layer
from .optim import Adam

N_CLASSES = 12
MIN_FRAMES = 16
TRAIN_WINDOW = 116
DEFAULT_WIDTHS = (64, 128, 256, 256)


class TrainingError(RuntimeError):
    pass


def build_layers(widths=DEFAULT_WIDTHS, n_classes=N_CLASSES, dropout=0.3, rng=None, dtype=np.float32) -> list[Layer]:
    w1, w2, w3, w4 = widths
    return [
        Conv2d(1, w1, 5, stride=2, padding=2, rng=rng, dtype=dtype), ReLU(), BatchNorm2d(w1, dtype=dtype),
        AvgPool2d(2),
        Conv2d(w1, w2, 3, stride=1, padding=1, rng=rng, dtype=dtype), ReLU(), BatchNorm2d(w2, dtype=dtype),
        AvgPool2d(2),
        Dropout(dropout),
        Conv2d(w2, w3, 3, stride=1, padding=1, rng=rng, dtype=dtype), ReLU(), BatchNorm2d(w3, dtype=dtype),
        Conv2d(w3, w4, 3, stride=1, padding=1, rng=rng, dtype=dtype), ReLU(), BatchNorm2d(w4, dtype=dtype),
        Dropout(dropout),
        Conv2d(w4, n_classes, 1, stride=1, padding=0, rng=rng, dtype=dtype),
        GlobalPool(),
    ]


class ClassifierModel:
    """CNN parameters plus the front-end configuration they were trained with."""

    def __init__(
        self,
        widths: Sequence[int] = DEFAULT_WIDTHS,
        n_classes: int = N_CLASSES,
        n_mels: int = 100,
        dropout: float = 0.3,
        seed: int = 0,
        dtype=np.float32,
        frontend: FrontendConfig | None = None,
        layers: list[Layer] | None = None,
    ):
        self.widths = tuple(int(w) for w in widths)
        self.n_classes = n_classes
        self.n_mels = n_mels
        self.dropout = dropout
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.frontend = frontend if frontend is not None else FrontendConfig(n_mels=n_mels)
        self.layers = layers if layers is not None else build_layers(
            self.widths, n_classes, dropout, np.random.default_rng(seed), self.dtype
        )
        self.training = False
        self.min_frames = MIN_FRAMES

    # -- parameters -------------------------------------------------------
    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    def architecture(self) -> dict:
        return {
            "widths": list(self.widths),
            "n_classes": self.n_classes,
            "n_mels": self.n_mels,
            "dropout": self.dropout,
            "min_frames": self.min_frames,
            "layers": [layer.config() for layer in self.layers],
        }

    def train(self) -> "ClassifierModel":
        self.training = True
        return self

    def eval(self) -> "ClassifierModel":
        self.training = False
        return self

    def astype(self, dtype) -> "ClassifierModel":
        """Copy of the model with parameters and buffers cast to ``dtype``."""
        clone = ClassifierModel(self.widths, self.n_classes, self.n_mels, self.dropout, self.seed, dtype, self.frontend)
        for dst, src in zip(clone.layers, self.layers):
            for k, v in src.params.items():
                dst.params[k] = v.astype(dtype)
            for k, v in src.buffers.items():
                dst.buffers[k] = v.astype(dtype)
        clone.training = self.training
        return clone

    # -- forward / backward ----------------------------------------------
    def forward(self, spec: np.ndarray, train: bool | None = None, rng=None):
        """Logits for one ``(n_mels, T)`` spectrogram or a ``(B, n_mels, T)`` batch.

        Returns ``(logits, tape)``; logits are ``(n_classes,)`` or ``(B, n_classes)``.
        """
        train = self.training if train is None else train
        spec = np.asarray(spec)
        single = spec.ndim == 2
        x = spec[None] if single else spec
        if x.shape[1] != self.n_mels:
            raise ValueError(f"expected {self.n_mels} mel bands, got {x.shape[1]}")
        if x.shape[2] < self.min_frames:
            raise ValueError(
                f"spectrogram has {x.shape[2]} frames; pad_repeat it to at least {self.min_frames}"
            )
        if train and rng is None:
            rng = np.random.default_rng()
        h = x[:, None].astype(self.dtype)
        caches = []
        for layer in self.layers:
            h, c = layer.forward(h, train=train, rng=rng)
            caches.append(c)
        return (h[0] if single else h), (caches, single, train)

    def backward(self, tape, g_logits: np.ndarray, param_grads: bool = False):
        """Back-propagate ``dL/dlogits``; returns ``(dL/dspec, param grads)``."""
        caches, single, _ = tape
        g = np.asarray(g_logits, dtype=self.dtype)
        if single:
            g = g[None]
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            g, lg = self.layers[i].backward(caches[i], g, param_grads=param_grads)
            for k, v in lg.items():
                grads[f"{i}.{k}"] = v
        g = g[:, 0]
        return (g[0] if single else g), grads


def forward(model: ClassifierModel, spec: np.ndarray):
    return model.forward(spec)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(labels))
    p = softmax(z)
    n = z.shape[0]
    lse = np.log(np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1)) + z.max(axis=1)
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    g /= n
    return loss, (g[0] if single else g)


@dataclass
class Prediction:
    class_index: int
    confidence: float
    probabilities: np.ndarray

    @classmethod
    def from_logits(cls, logits) -> "Prediction":
        p = softmax(logits)
        k = int(np.argmax(p))
        return cls(k, float(p[k]), p)

    def to_dict(self) -> dict:
        return {
            "class_index": self.class_index,
            "confidence": self.confidence,
            "probabilities": [float(v) for v in self.probabilities],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Prediction":
        return cls(int(d["class_index"]), float(d["confidence"]), np.asarray(d["probabilities"], float))


def forward_system(model: ClassifierModel, samples, cfg: FrontendConfig | None = None):
    """Waveform -> logits through the front-end (eval mode); returns ``(logits, tape)``."""
    samples = np.asarray(getattr(samples, "samples", samples), dtype=np.float64)
    cfg = model.frontend if cfg is None else cfg
    spec, ftape = forward_frontend(samples, cfg)
    n = spec.shape[1]
    padded = pad_repeat(spec, model.min_frames)
    logits, mtape = model.forward(padded, train=False)
    return logits, (ftape, mtape, n)


def backward_system(model: ClassifierModel, tape, g_logits) -> np.ndarray:
    """dL/dwaveform from dL/dlogits of a :func:`forward_system` call."""
    ftape, mtape, n = tape
    g_spec, _ = model.backward(mtape, g_logits)
    g_spec = np.asarray(g_spec, dtype=np.float64)
    if g_spec.shape[1] != n:
        idx = pad_repeat_index(n, g_spec.shape[1])
        folded = np.zeros((g_spec.shape[0], n))
        np.add.at(folded, (slice(None), idx), g_spec)
        g_spec = folded
    return backward_frontend(ftape, g_spec)


def predict_logits(model: ClassifierModel, w, cfg: FrontendConfig | None = None) -> np.ndarray:
    logits, _ = forward_system(model, np.asarray(getattr(w, "samples", w), dtype=np.float64), cfg)
    return np.asarray(logits, dtype=np.float64)


def predict(model: ClassifierModel, w, cfg: FrontendConfig | None = None) -> Prediction:
    """Classify a full-length clip (repeat-padded to the network minimum if short)."""
    return Prediction.from_logits(predict_logits(model, w, cfg))


def loss_and_input_gradient(model: ClassifierModel, w, target: int, cfg: FrontendConfig | None = None):
    """Cross-entropy toward ``target``, its waveform gradient, and the logits.

    The model is run in eval mode: running BN statistics, no dropout.
    """
    samples = np.asarray(getattr(w, "samples", w), dtype=np.float64)
    logits, tape = forward_system(model, samples, cfg)
    loss, g_logits = cross_entropy(logits, target)
    grad = backward_system(model, tape, g_logits)
    return loss, grad, np.asarray(logits, dtype=np.float64)


def input_gradient(model: ClassifierModel, w, cfg: FrontendConfig | None, target: int) -> np.ndarray:
    """d CE(f(w), target) / d w."""
    return loss_and_input_gradient(model, w, target, cfg)[1]


# -- training -------------------------------------------------------------
@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 150
    batch_size: int = 16
    decay_epoch: int = 90
    decay_factor: float = 0.1
    seed: int = 0
    dropout_rate: float = 0.3
    window_len: int = TRAIN_WINDOW

    def __post_init__(self):
        if self.epochs < self.decay_epoch:
            raise ValueError("epochs must be >= decay_epoch")
        if self.learning_rate <= 0 or self.decay_factor <= 0 or self.batch_size < 1:
            raise ValueError("rates and batch size must be positive")


def fit(
    model: ClassifierModel,
    train_data: Sequence[tuple[Waveform, int]],
    cfg: TrainConfig,
    frontend: FrontendConfig,
    val_data: Sequence[tuple[Waveform, int]] | None = None,
    log_path=None,
    progress=None,
):
    """Train ``model`` in place with Adam on random length-116 windows.

    ``frontend`` must already carry the normalization statistics of the
    training split. Returns ``(model, log)``; ``log`` holds one dict per
    epoch (also appended as JSON lines to ``log_path`` when given).
    """
    if len(train_data) == 0:
        raise TrainingError("empty training set")
    model.frontend = frontend
    rng = np.random.default_rng(cfg.seed)
    windows = []
    for w, _ in train_data:
        spec, _ = forward_frontend(w, frontend)
        windows.append(np.stack(extract_windows(spec, cfg.window_len)).astype(model.dtype))
    labels = np.array([int(y) for _, y in train_data])
    params = model.named_params()
    opt = Adam(params, lr=cfg.learning_rate)
    log = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            opt.lr = cfg.learning_rate * (cfg.decay_factor if epoch >= cfg.decay_epoch else 1.0)
            order = rng.permutation(len(train_data))
            losses, correct = [], 0
            model.train()
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                batch = np.stack([windows[i][rng.integers(len(windows[i]))] for i in idx])
                logits, tape = model.forward(batch, train=True, rng=rng)
                loss, g = cross_entropy(logits, labels[idx])
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
                _, grads = model.backward(tape, g, param_grads=True)
                opt.step(grads)
                losses.append(loss * len(idx))
                correct += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
            model.eval()
            entry = {
                "epoch": epoch,
                "train_loss": float(np.sum(losses) / len(order)),
                "train_accuracy": correct / len(order),
                "lr": opt.lr,
            }
            if val_data is not None and len(val_data):
                entry["val_accuracy"] = evaluate(model, val_data).accuracy
            log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if progress:
                progress(entry)
    finally:
        if log_fh:
            log_fh.close()
        model.eval()
    return model, log


@dataclass
class EvalResult:
    accuracy: float
    mean_confidence: float
    predictions: list[Prediction] = field(repr=False)


def evaluate(model: ClassifierModel, dataset: Sequence[tuple[Waveform, int]], cfg: FrontendConfig | None = None) -> EvalResult:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    preds = [predict(model, w, cfg) for w, _ in dataset]
    labels = [int(y) for _, y in dataset]
    acc = float(np.mean([p.class_index == y for p, y in zip(preds, labels)]))
    return EvalResult(acc, float(np.mean([p.confidence for p in preds])), preds)


# -- checkpoint -------------------------------------------------------------
MAGIC = b"ADVAUDIO"


def save_checkpoint(model: ClassifierModel, path) -> None:
    """JSON header (architecture, front-end config, tensor table) + little-endian f32 payload."""
    tensors = {**{f"param:{k}": v for k, v in model.named_params().items()},
               **{f"buffer:{k}": v for k, v in model.named_buffers().items()}}
    table, offset = [], 0
    for name, arr in tensors.items():
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format": "advaudio-checkpoint",
        "version": 1,
        "architecture": model.architecture(),
        "seed": model.seed,
        "frontend": model.frontend.to_dict(),
        "tensors": table,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> ClassifierModel:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an advaudio checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    payload = np.frombuffer(data[16 + n :], dtype="<f4")
    arch = header["architecture"]
    layers = [build_layer(c, dtype=dtype) for c in arch["layers"]]
    model = ClassifierModel(
        arch["widths"], arch["n_classes"], arch["n_mels"], arch["dropout"], header.get("seed", 0),
        dtype, FrontendConfig.from_dict(header["frontend"]), layers=layers,
    )
    model.min_frames = arch.get("min_frames", MIN_FRAMES)
    params, buffers = model.named_params(), model.named_buffers()
    for t in header["tensors"]:
        kind, key = t["name"].split(":", 1)
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = payload[t["offset"] : t["offset"] + size].reshape(t["shape"]).astype(dtype)
        target = params if kind == "param" else buffers
        target[key][...] = arr
    return model.eval()
