"""Class-rebalancing strategies for classifier re-training.

Three strategies over empirical class frequencies pi: class-balanced
sampling (handled by the data module's sampler; the loss stays plain
cross-entropy), generalized re-weighting with normalized inverse-frequency
weights (1/pi_y)^rho, and logit adjustment adding rho * log(pi_k) to logit k
inside the training loss only. Evaluation always uses unadjusted logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import cross_entropy, softmax

KINDS = ("none", "cbs", "grw", "la")


@dataclass(frozen=True)
class BalancingSpec:
    kind: str = "none"
    rho: float = 1.0
    frequencies: np.ndarray | None = None

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown balancing kind {self.kind!r}; expected one of {KINDS}")
        if self.rho < 0.0:
            raise ValueError("rho must be >= 0")
        if self.kind in ("grw", "la"):
            if self.frequencies is None:
                raise ValueError(f"{self.kind} needs class frequencies")
            if np.any(np.asarray(self.frequencies) <= 0.0):
                raise ValueError("class frequencies must be strictly positive")

    @property
    def uses_class_balanced_sampler(self) -> bool:
        return self.kind == "cbs"


def grw_weights(pi, rho: float) -> np.ndarray:
    """Normalized inverse-frequency class weights; a probability vector."""
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi <= 0.0):
        raise ValueError("class frequencies must be strictly positive")
    raw = (1.0 / pi) ** rho
    return raw / raw.sum()


def grw_weight(pi, rho: float, y: int) -> float:
    return float(grw_weights(pi, rho)[y])


def logit_adjust(logits, pi, rho: float) -> np.ndarray:
    """Shift logit k by rho * log(pi_k). Training-loss-side only."""
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi <= 0.0):
        raise ValueError("class frequencies must be strictly positive")
    return np.asarray(logits, dtype=np.float64) + rho * np.log(pi)


def balanced_ce_loss_and_grad(logits: np.ndarray, labels: np.ndarray, spec: BalancingSpec):
    """Batch-mean rebalanced cross-entropy and its gradient wrt raw logits.

    none/cbs: plain CE. grw: per-example weight grw_weights(pi, rho)[y]
    without batch renormalization. la: CE of the adjusted logits (the shift
    is constant, so the gradient passes through unchanged).
    """
    spec.validate()
    n = len(labels)
    rows = np.arange(n)
    if spec.kind == "la":
        adjusted = logit_adjust(logits, spec.frequencies, spec.rho)
        p = softmax(adjusted)
        loss = cross_entropy(p, labels).mean()
        grad = p.copy()
        grad[rows, labels] -= 1.0
        return loss, grad / n
    p = softmax(logits)
    ce = cross_entropy(p, labels)
    grad = p.copy()
    grad[rows, labels] -= 1.0
    if spec.kind == "grw":
        w = grw_weights(spec.frequencies, spec.rho)[labels]
        return (w * ce).mean(), (w[:, None] * grad) / n
    return ce.mean(), grad / n


def make_loss(spec: BalancingSpec):
    """Adapt a BalancingSpec to the (logits, labels) loss-callback contract."""

    def loss_fn(logits, labels):
        return balanced_ce_loss_and_grad(logits, labels, spec)

    return loss_fn
