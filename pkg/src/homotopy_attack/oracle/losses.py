"""Attack losses over a :class:`Model` and the oracle that binds them to one image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model

__all__ = [
    "AttackGoal",
    "LossOracle",
    "OracleError",
    "loss_targeted_ce",
    "loss_nontargeted_margin",
    "ce_from_logits",
    "margin_from_logits",
]


class OracleError(RuntimeError):
    """The loss or its gradient came back non-finite."""


@dataclass(frozen=True)
class AttackGoal:
    """``targeted`` pushes the prediction to ``label``; ``nontargeted`` pushes it away from ``label``."""

    mode: str
    label: int
    kappa: float = 0.0

    def __post_init__(self):
        if self.mode not in ("targeted", "nontargeted"):
            raise ValueError(f"unknown goal mode {self.mode!r}")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")

    @classmethod
    def targeted(cls, t: int) -> "AttackGoal":
        return cls("targeted", int(t))

    @classmethod
    def nontargeted(cls, y0: int, kappa: float = 0.0) -> "AttackGoal":
        return cls("nontargeted", int(y0), float(kappa))

    def validate(self, num_classes: int) -> None:
        if not 0 <= self.label < num_classes:
            raise ValueError(f"class {self.label} out of range [0, {num_classes})")
        if self.mode == "nontargeted" and num_classes < 2:
            raise ValueError("margin loss needs at least two classes")

    def satisfied_by(self, predicted: int) -> bool:
        if self.mode == "targeted":
            return predicted == self.label
        return predicted != self.label

    def as_dict(self) -> dict:
        return {"mode": self.mode, "label": self.label, "kappa": self.kappa}


def ce_from_logits(z: np.ndarray, t: int) -> tuple[float, np.ndarray]:
    """Cross entropy ``-log softmax(z)_t`` and its logit gradient."""
    shifted = z - z.max()
    e = np.exp(shifted)
    total = e.sum()
    value = float(np.log(total) - shifted[t])
    dz = e / total
    dz[t] -= 1.0
    return value, dz


def _runner_up(z: np.ndarray, y0: int) -> int:
    masked = z.copy()
    masked[y0] = -np.inf
    return int(np.argmax(masked))  # argmax keeps the lowest index on ties


def margin_from_logits(z: np.ndarray, y0: int, kappa: float) -> tuple[float, np.ndarray]:
    """``max(z[y0] - max_{i != y0} z[i], -kappa)`` and a subgradient in logit space."""
    r = _runner_up(z, y0)
    gap = float(z[y0] - z[r])
    dz = np.zeros_like(z)
    if gap > -kappa:
        dz[y0] = 1.0
        dz[r] = -1.0
        return gap, dz
    return -float(kappa), dz


def _value_and_grad(model: Model, x: np.ndarray, head):
    logits, caches = model.forward_batch(x[None], keep_cache=True)
    value, dz = head(logits[0])
    if not np.any(dz):
        return value, np.zeros_like(x)
    dx, _ = model.backward_batch(caches, dz[None], need_params=False)
    return value, dx[0]


def loss_targeted_ce(model: Model, x0, t: int, delta) -> tuple[float, np.ndarray]:
    if not 0 <= t < model.num_classes:
        raise ValueError(f"target {t} out of range [0, {model.num_classes})")
    x = np.asarray(x0, dtype=np.float64) + np.asarray(delta, dtype=np.float64)
    return _value_and_grad(model, x, lambda z: ce_from_logits(z, t))


def loss_nontargeted_margin(model: Model, x0, y0: int, kappa: float, delta) -> tuple[float, np.ndarray]:
    if model.num_classes < 2:
        raise ValueError("margin loss needs at least two classes")
    if not 0 <= y0 < model.num_classes:
        raise ValueError(f"label {y0} out of range [0, {model.num_classes})")
    x = np.asarray(x0, dtype=np.float64) + np.asarray(delta, dtype=np.float64)
    return _value_and_grad(model, x, lambda z: margin_from_logits(z, y0, kappa))


class LossOracle:
    """Attack loss ``f(x0 + delta)`` for a fixed model, benign image and goal.

    Targeted goals use cross entropy toward the target, nontargeted goals the
    margin loss on the true label.
    """

    def __init__(self, model: Model, x0, goal: AttackGoal):
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape != model.input_shape:
            raise ValueError(f"x0 shape {x0.shape} does not match model input {model.input_shape}")
        goal.validate(model.num_classes)
        self.model = model
        self.x0 = x0
        self.goal = goal
        self.evaluations = 0
        if goal.mode == "targeted":
            self._head = lambda z: ce_from_logits(z, goal.label)
        else:
            self._head = lambda z: margin_from_logits(z, goal.label, goal.kappa)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.x0.shape

    def logits(self, delta) -> np.ndarray:
        return self.model.forward_batch((self.x0 + delta)[None])[0]

    def value(self, delta) -> float:
        self.evaluations += 1
        v = self._head(self.logits(delta))[0]
        if not np.isfinite(v):
            raise OracleError(f"non-finite loss value {v}")
        return v

    def evaluate(self, delta) -> tuple[float, np.ndarray]:
        self.evaluations += 1
        v, g = _value_and_grad(self.model, self.x0 + delta, self._head)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            raise OracleError("non-finite loss value or gradient")
        return v, g

    def predict(self, x) -> int:
        return int(np.argmax(self.model.forward_batch(np.asarray(x, dtype=np.float64)[None])[0]))

    def is_success(self, delta) -> bool:
        return self.goal.satisfied_by(int(np.argmax(self.logits(delta))))
