"""Running weight averaging with a diagonal Gaussian posterior.

Tracks first and second moments of parameter snapshots captured late in
training, freezes a diagonal covariance (second moment minus squared mean,
clamped at zero), and samples feature-extractor parameters from the
resulting Gaussian. The classifier part of the moments is kept for the
averaged point estimate but excluded from sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import ModelParams, cosine_lr, flatten_params, theta_size, unflatten_params


@dataclass(frozen=True)
class SwaSchedule:
    """When averaging starts, how often snapshots are captured, and the
    constant learning rate used during the averaging phase.

    ``capture_interval_steps`` is a step modulus; training loops set it to
    their steps-per-epoch so captures land on epoch boundaries.
    """

    start_fraction: float = 0.75
    capture_interval_steps: int = 1
    swa_lr: float = 0.01

    def validate(self) -> None:
        if not 0.0 < self.start_fraction < 1.0:
            raise ValueError("start_fraction must be in (0, 1)")
        if self.capture_interval_steps < 1:
            raise ValueError("capture_interval_steps must be >= 1")
        if self.swa_lr <= 0.0:
            raise ValueError("swa_lr must be positive")


@dataclass
class SwagPosterior:
    """First/second moments over the flat parameter vector plus the frozen
    diagonal covariance. Only the leading ``theta_dim`` entries (the feature
    extractor) participate in sampling."""

    mean: np.ndarray
    sq_mean: np.ndarray
    count: int
    theta_dim: int
    template: ModelParams
    sigma: np.ndarray | None = None
    frozen: bool = False


def new_posterior(template: ModelParams) -> SwagPosterior:
    size = flatten_params(template).size
    return SwagPosterior(
        mean=np.zeros(size),
        sq_mean=np.zeros(size),
        count=0,
        theta_dim=theta_size(template),
        template=template.copy(),
    )


def update_moments(posterior: SwagPosterior, params: ModelParams) -> SwagPosterior:
    """Fold one snapshot into the running moments:
    m <- (n m + theta) / (n+1), m2 <- (n m2 + theta^2) / (n+1), n <- n+1."""
    if posterior.frozen:
        raise ValueError("cannot update a frozen posterior")
    flat = flatten_params(params)
    if flat.size != posterior.mean.size:
        raise ValueError("snapshot shape does not match posterior")
    n = posterior.count
    posterior.mean = (n * posterior.mean + flat) / (n + 1)
    posterior.sq_mean = (n * posterior.sq_mean + flat * flat) / (n + 1)
    posterior.count = n + 1
    return posterior


def freeze(posterior: SwagPosterior) -> SwagPosterior:
    """Fix the diagonal covariance max(m2 - m^2, 0) and stop accepting
    snapshots. Needs at least two captures for a non-degenerate variance."""
    if posterior.count < 2:
        raise ValueError(f"need >= 2 captured snapshots, have {posterior.count}")
    posterior.sigma = np.maximum(posterior.sq_mean - posterior.mean**2, 0.0)
    posterior.frozen = True
    return posterior


def swa_params(posterior: SwagPosterior) -> ModelParams:
    """The averaged point estimate (feature extractor and classifier)."""
    if posterior.count < 1:
        raise ValueError("no snapshots captured")
    return unflatten_params(posterior.mean, posterior.template)


def sample_theta(posterior: SwagPosterior, rng: np.random.Generator):
    """Draw feature-extractor parameters mean + sqrt(diag) * eps."""
    if not posterior.frozen:
        raise ValueError("posterior must be frozen before sampling")
    td = posterior.theta_dim
    flat = posterior.mean.copy()
    flat[:td] += np.sqrt(posterior.sigma[:td]) * rng.standard_normal(td)
    return unflatten_params(flat, posterior.template).layers


def should_capture(step: int, total_steps: int, schedule: SwaSchedule) -> bool:
    """True when the completed-step count is strictly past the start fraction
    and on the capture modulus."""
    if step > total_steps:
        raise ValueError("step beyond total_steps")
    return (
        step > schedule.start_fraction * total_steps
        and step % schedule.capture_interval_steps == 0
    )


def swa_learning_rate(step: int, total_steps: int, base_lr: float, schedule: SwaSchedule) -> float:
    """Cosine decay before the averaging phase, constant swa_lr after it."""
    if step + 1 > schedule.start_fraction * total_steps:
        return schedule.swa_lr
    return cosine_lr(step, total_steps, base_lr)
