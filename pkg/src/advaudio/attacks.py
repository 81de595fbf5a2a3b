"""White-box waveform attacks: FGSM, PGDn, C&W and multi-scale C&W.

All four perturb the raw signal and differentiate through the mel front-end
and the frozen (eval-mode) classifier. The iterative methods feed the
*sign* of the gradient into Adam, whose step size is ``eta``, and clip the
perturbation to ``[-epsilon, epsilon]`` after every update.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierModel, Prediction, backward_system, cross_entropy, forward_system
from .metrics import snr_db
from .optim import Adam
from .spectral import MultiScaleReference

METHODS = ("fgsm", "pgdn", "cw", "mscw")
TARGETED = ("cw", "mscw")
# Per-bin mean keeps the spectral term on the same footing as alpha * CE;
# with plain sums it outweighs the network gradient by orders of magnitude
# and the sign step never leaves delta = 0.
SPEC_REDUCTION = "mean"


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    method: str
    lam: float = 0.0  # FGSM step (lambda)
    epsilon: float = 0.0
    eta: float = 1e-4
    alpha: float = 1.0
    max_iters: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.epsilon < 0 or self.lam < 0 or self.alpha < 0:
            raise ValueError("lambda, epsilon and alpha must be non-negative")
        if self.method != "fgsm" and self.eta <= 0:
            raise ValueError("eta must be positive for iterative methods")

    @property
    def targeted(self) -> bool:
        return self.method in TARGETED

    def to_dict(self) -> dict:
        return {"method": self.method, "lambda": self.lam, "epsilon": self.epsilon, "eta": self.eta,
                "alpha": self.alpha, "max_iters": self.max_iters, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(d["method"], d.get("lambda", 0.0), d.get("epsilon", 0.0), d.get("eta", 1e-4),
                   d.get("alpha", 1.0), d.get("max_iters", 500), d.get("seed", 0))

    def grid_key(self) -> dict:
        """The hyperparameters that matter for this method."""
        if self.method == "fgsm":
            return {"lambda": self.lam}
        if self.method == "pgdn":
            return {"epsilon": self.epsilon, "eta": self.eta}
        return {"alpha": self.alpha, "epsilon": self.epsilon, "eta": self.eta}


def _encode_snr(v):
    if v is None:
        return None
    return "inf" if math.isinf(v) else v


@dataclass
class AttackResult:
    method: str
    label: int
    success: bool
    delta: np.ndarray = field(repr=False)
    iterations_used: int
    snr_db: float | None
    original_prediction: Prediction
    adversarial_prediction: Prediction
    target: int | None = None

    @property
    def bound(self) -> float:
        return float(np.max(np.abs(self.delta)))

    def to_dict(self, include_delta: bool = True) -> dict:
        d = {
            "method": self.method,
            "label": self.label,
            "target": self.target,
            "success": self.success,
            "iterations_used": self.iterations_used,
            "snr_db": _encode_snr(self.snr_db),
            "original_prediction": self.original_prediction.to_dict(),
            "adversarial_prediction": self.adversarial_prediction.to_dict(),
        }
        if include_delta:
            d["delta"] = [float(v) for v in self.delta]
        return d

    def to_json(self, include_delta: bool = True) -> str:
        return json.dumps(self.to_dict(include_delta))

    @classmethod
    def from_dict(cls, d: dict) -> "AttackResult":
        snr = d.get("snr_db")
        return cls(
            d["method"], int(d["label"]), bool(d["success"]), np.asarray(d.get("delta", []), float),
            int(d["iterations_used"]), math.inf if snr == "inf" else snr,
            Prediction.from_dict(d["original_prediction"]), Prediction.from_dict(d["adversarial_prediction"]),
            d.get("target"),
        )


def sample_target(prediction: int, n_classes: int = 12, seed: int = 0, sample_id: int = 0) -> int:
    """Uniform draw from the classes other than ``prediction``.

    Deterministic in ``(seed, sample_id)`` so the same targets can be reused
    across every grid point.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    r = int(np.random.default_rng([seed, sample_id, 0x7A29]).integers(n_classes - 1))
    return r if r < prediction else r + 1


def _samples(w) -> np.ndarray:
    return np.asarray(getattr(w, "samples", w), dtype=np.float64)


def _check_grad(g):
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite gradient")
    return g


def _result(cfg, x, delta, iters, success, label, target, orig, adv_logits):
    return AttackResult(
        method=cfg.method,
        label=int(label),
        success=bool(success),
        delta=delta,
        iterations_used=int(iters),
        snr_db=snr_db(x, delta) if success else None,
        original_prediction=orig,
        adversarial_prediction=Prediction.from_logits(adv_logits),
        target=None if target is None else int(target),
    )


def fgsm(model: ClassifierModel, w, label: int, cfg: AttackConfig, sample_id: int = 0) -> AttackResult:
    """Single signed-gradient ascent step of size ``cfg.lam``."""
    x = _samples(w)
    logits, tape = forward_system(model, x)
    orig = Prediction.from_logits(logits)
    if orig.class_index != label:
        return _result(cfg, x, np.zeros_like(x), 0, True, label, None, orig, logits)
    _, g_logits = cross_entropy(logits, label)
    g = _check_grad(backward_system(model, tape, g_logits))
    delta = cfg.lam * np.sign(g)
    adv_logits, _ = forward_system(model, x + delta)
    success = int(np.argmax(adv_logits)) != label
    return _result(cfg, x, delta, 1, success, label, None, orig, adv_logits)


def _iterative(model, x, label, target, cfg, delta, extra_loss, check_success=True):
    """Shared loop of the Adam-driven methods.

    ``extra_loss(delta) -> gradient`` adds the perturbation-size term of the
    targeted methods; ``None`` means untargeted ascent on the CE loss.
    """
    eps = cfg.epsilon
    orig_logits, _ = forward_system(model, x)
    orig = Prediction.from_logits(orig_logits)
    goal = label if target is None else target
    adam = Adam({"delta": delta}, lr=cfg.eta)
    k = 0
    while True:
        logits, tape = forward_system(model, x + delta)
        pred = int(np.argmax(logits))
        hit = pred != label if target is None else pred == target
        if check_success and hit:
            return _result(cfg, x, delta.copy(), k, True, label, target, orig, logits)
        if k == cfg.max_iters:
            return _result(cfg, x, delta.copy(), k, hit, label, target, orig, logits)
        _, g_logits = cross_entropy(logits, goal)
        g_net = _check_grad(backward_system(model, tape, g_logits))
        if target is None:
            step = -np.sign(g_net)  # ascent on CE == descent on -CE
        else:
            step = np.sign(cfg.alpha * g_net + _check_grad(extra_loss(delta)))
        adam.step({"delta": step})
        np.clip(delta, -eps, eps, out=delta)
        k += 1


def pgdn(model: ClassifierModel, w, label: int, cfg: AttackConfig, sample_id: int = 0,
         check_success: bool = True) -> AttackResult:
    """Untargeted projected ascent from a uniform random start in the eps-box."""
    x = _samples(w)
    logits, _ = forward_system(model, x)
    orig = Prediction.from_logits(logits)
    if check_success and orig.class_index != label:
        return _result(cfg, x, np.zeros_like(x), 0, True, label, None, orig, logits)
    rng = np.random.default_rng([cfg.seed, sample_id])
    delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    return _iterative(model, x, label, None, cfg, delta, None, check_success)


def cw(model: ClassifierModel, w, label: int, target: int, cfg: AttackConfig, sample_id: int = 0,
       check_success: bool = True) -> AttackResult:
    """Targeted: minimise ``||delta||^2 + alpha * CE(f(x + delta), target)``."""
    x = _samples(w)
    _guard_target(model, x, target, check_success)
    return _iterative(model, x, label, target, cfg, np.zeros_like(x), lambda d: 2.0 * d, check_success)


def ms_cw(model: ClassifierModel, w, label: int, target: int, cfg: AttackConfig, sample_id: int = 0,
          check_success: bool = True) -> AttackResult:
    """Targeted: minimise ``L_spec(x, x + delta) + alpha * CE(f(x + delta), target)``."""
    x = _samples(w)
    _guard_target(model, x, target, check_success)
    ref = MultiScaleReference(x, reduction=SPEC_REDUCTION)
    return _iterative(model, x, label, target, cfg, np.zeros_like(x), lambda d: ref(x + d)[1], check_success)


def _guard_target(model, x, target, check_success):
    if target is None:
        raise ValueError("targeted attack needs a target class")
    if check_success and int(np.argmax(forward_system(model, x)[0])) == target:
        raise ValueError("target equals the clean prediction")


def cw_total_loss(model: ClassifierModel, w, delta, target: int, alpha: float) -> float:
    x = _samples(w)
    logits, _ = forward_system(model, x + delta)
    return float(np.sum(delta**2) + alpha * cross_entropy(logits, target)[0])


def ms_cw_total_loss(model: ClassifierModel, w, delta, target: int, alpha: float) -> float:
    x = _samples(w)
    logits, _ = forward_system(model, x + delta)
    spec, _ = MultiScaleReference(x, reduction=SPEC_REDUCTION)(x + delta, need_grad=False)
    return float(spec + alpha * cross_entropy(logits, target)[0])


def run_attack(model: ClassifierModel, w, label: int, cfg: AttackConfig, target: int | None = None,
               sample_id: int = 0) -> AttackResult:
    if cfg.method == "fgsm":
        return fgsm(model, w, label, cfg, sample_id)
    if cfg.method == "pgdn":
        return pgdn(model, w, label, cfg, sample_id)
    if cfg.method == "cw":
        return cw(model, w, label, target, cfg, sample_id)
    return ms_cw(model, w, label, target, cfg, sample_id)
