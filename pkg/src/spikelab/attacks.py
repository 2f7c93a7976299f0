"""Signed-gradient attacks under an L-infinity budget.

Both the one-step and the iterative attack maximize a pluggable scalar
objective by stepping along the sign of its input gradient, projecting back
onto the epsilon-ball around the clean input and clamping to the valid pixel
range after every step. The objective is always phrased as gradient ascent;
targeted attacks therefore hand in the negated cross-entropy against the
target class.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, softmax_cross_entropy

MODES = ("targeted", "untargeted")


@dataclass
class AttackConfig:
    epsilon: float
    alpha: float | None = None
    steps: int = 1
    mode: str = "untargeted"
    norm: str = "linf"
    clamp: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.norm != "linf":
            raise ValueError("only the L-infinity norm is implemented")
        if self.alpha is None:
            self.alpha = self.epsilon if self.steps == 1 else self.epsilon / 4.0
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.alpha > self.epsilon:
            warnings.warn("step size alpha exceeds epsilon; steps will be "
                          "dominated by the projection", stacklevel=2)


@dataclass
class AttackProblem:
    """What the optimizer needs to know about one batch of samples.

    ``objective`` maps the perturbed attack variable to a scalar tensor that
    the attack ASCENDS. ``predict`` evaluates final labels on raw arrays.
    """

    objective: object  # callable: Tensor -> Tensor (scalar)
    predict: object    # callable: np.ndarray -> np.ndarray of class indices
    labels: np.ndarray
    target_class: int | None = None


@dataclass
class AttackResult:
    adversarial: np.ndarray
    deltas: np.ndarray
    predictions: np.ndarray
    succeeded: np.ndarray
    zero_grad: np.ndarray = field(default=None)

    @property
    def success_rate(self) -> float:
        return 100.0 * float(self.succeeded.mean())


def adv_loss(logits: Tensor, labels: np.ndarray, mode: str,
             target_class: int | None = None) -> Tensor:
    """Cross-entropy term of the attack objective.

    Targeted mode scores the logits against the fixed target class,
    untargeted mode against each sample's own label.
    """
    if mode == "targeted":
        if target_class is None:
            raise ValueError("targeted mode needs a target class")
        target = np.full(logits.data.shape[0], target_class, dtype=np.int64)
        return softmax_cross_entropy(logits, target, reduction="mean")
    if mode == "untargeted":
        return softmax_cross_entropy(logits, np.asarray(labels, np.int64),
                                     reduction="mean")
    raise ValueError(f"mode must be one of {MODES}")


def _input_grad(problem: AttackProblem, x: np.ndarray) -> np.ndarray:
    var = Tensor(x.copy(), requires_grad=True)
    loss = problem.objective(var)
    loss.backward()
    return var.grad if var.grad is not None else np.zeros_like(x)


def _flat_abs_max(arr: np.ndarray) -> np.ndarray:
    return np.abs(arr).reshape(arr.shape[0], -1).max(axis=1)


def _succeeded(problem: AttackProblem, predictions: np.ndarray,
               mode: str) -> np.ndarray:
    if mode == "targeted":
        return predictions == problem.target_class
    return predictions != problem.labels


def fgsm(problem: AttackProblem, x0: np.ndarray, cfg: AttackConfig) -> AttackResult:
    """Single signed step of size epsilon, clamped to the valid range."""
    grad = _input_grad(problem, x0)
    zero = _flat_abs_max(grad) == 0.0
    if zero.all():
        warnings.warn("attack gradient is identically zero; returning input",
                      stacklevel=2)
    adv = np.clip(x0 + cfg.epsilon * np.sign(grad), *cfg.clamp).astype(x0.dtype)
    predictions = problem.predict(adv)
    return AttackResult(adv, adv - x0, predictions,
                        _succeeded(problem, predictions, cfg.mode), zero)


def pgd(problem: AttackProblem, x0: np.ndarray, cfg: AttackConfig) -> AttackResult:
    """Iterated signed steps with projection onto the epsilon-ball around x0.

    The perturbation is tracked explicitly so the projection never involves
    a floating-point cancellation: one step at alpha == epsilon reproduces
    the single-step attack bit for bit.
    """
    delta = np.zeros_like(x0)
    zero = np.ones(x0.shape[0], bool)
    for _ in range(cfg.steps):
        adv = np.clip(x0 + delta, *cfg.clamp).astype(x0.dtype)
        grad = _input_grad(problem, adv)
        zero &= _flat_abs_max(grad) == 0.0
        delta = np.clip(delta + cfg.alpha * np.sign(grad),
                        -cfg.epsilon, cfg.epsilon).astype(x0.dtype)
    if zero.all():
        warnings.warn("attack gradient is identically zero; returning input",
                      stacklevel=2)
    adv = np.clip(x0 + delta, *cfg.clamp).astype(x0.dtype)
    predictions = problem.predict(adv)
    return AttackResult(adv, adv - x0, predictions,
                        _succeeded(problem, predictions, cfg.mode), zero)


def run_attack(problem: AttackProblem, x0: np.ndarray, cfg: AttackConfig,
               method: str = "pgd") -> AttackResult:
    if method == "fgsm":
        return fgsm(problem, x0, cfg)
    if method == "pgd":
        return pgd(problem, x0, cfg)
    raise ValueError(f"unknown attack method {method!r}")
