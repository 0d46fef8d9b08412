"""Evaluation and analysis metrics.

Accuracy (overall and per class-frequency split), negative log-likelihood,
expected calibration error with confidence binning, per-instance dispersion
of stochastic representations (cosine distance to the centroid) and of
stochastic predictions (multi-distribution Jensen-Shannon divergence in
nats), quartile/correlation analysis of dispersion against per-instance NLL,
posterior-ensemble prediction, and per-class classifier diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import FEW, MANY, MEDIUM
from .netcore import classifier_logits, cross_entropy, features, softmax
from .swag import SwagPosterior, sample_theta

PROB_FLOOR = 1e-30


# ---------------------------------------------------------------------------
# Core metrics
# ---------------------------------------------------------------------------

def accuracy(probs: np.ndarray, labels: np.ndarray, class_splits: list[str] | None = None):
    """Fraction of argmax matches, overall and per split.

    Argmax ties resolve to the lowest class index. Splits with no examples
    are reported as None rather than zero.
    """
    preds = np.argmax(probs, axis=1)
    correct = preds == labels
    out = {"all": float(correct.mean())}
    if class_splits is not None:
        tags = np.asarray(class_splits)
        for name in (MANY, MEDIUM, FEW):
            mask = np.isin(labels, np.flatnonzero(tags == name))
            out[name] = float(correct[mask].mean()) if mask.any() else None
    return out


def per_instance_nll(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return cross_entropy(np.maximum(probs, PROB_FLOOR), labels)


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood in nats."""
    return float(per_instance_nll(probs, labels).mean())


@dataclass(frozen=True)
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_confidence: float
    accuracy: float


def reliability_bins(probs: np.ndarray, labels: np.ndarray, n_bins: int = 15) -> list[ReliabilityBin]:
    """Partition by max confidence into ((n-1)/N, n/N] bins.

    A confidence exactly on a boundary lands in the lower bin; a confidence
    of 0 (impossible for a softmax, handled defensively) lands in bin 1.
    Empty bins report zero count and zeros for the averages.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    boundaries = np.arange(1, n_bins + 1) / n_bins
    idx = np.searchsorted(boundaries, conf, side="left")
    idx = np.clip(idx, 0, n_bins - 1)
    bins = []
    for n in range(n_bins):
        mask = idx == n
        cnt = int(mask.sum())
        bins.append(
            ReliabilityBin(
                lo=n / n_bins,
                hi=(n + 1) / n_bins,
                count=cnt,
                mean_confidence=float(conf[mask].mean()) if cnt else 0.0,
                accuracy=float(correct[mask].mean()) if cnt else 0.0,
            )
        )
    return bins


def ece(probs: np.ndarray, labels: np.ndarray, n_bins: int = 15):
    """Expected calibration error: count-weighted |accuracy - confidence|
    over the occupied bins. Returns (value, bin table)."""
    bins = reliability_bins(probs, labels, n_bins)
    total = len(labels)
    value = sum(
        b.count / total * abs(b.accuracy - b.mean_confidence) for b in bins if b.count
    )
    return float(value), bins


# ---------------------------------------------------------------------------
# Dispersion
# ---------------------------------------------------------------------------

def dispersion_repr(reps: np.ndarray) -> np.ndarray:
    """Mean cosine distance of M representations to their centroid.

    Accepts (M, L) for one instance or (M, B, L); returns float or (B,).
    A zero-norm vector on either side of a cosine contributes distance 1.
    """
    r = np.asarray(reps, dtype=np.float64)
    single = r.ndim == 2
    if single:
        r = r[:, None, :]
    if r.shape[0] < 2:
        raise ValueError("need at least 2 representations")
    centroid = r.mean(axis=0)  # (B, L)
    c_norm = np.linalg.norm(centroid, axis=-1)  # (B,)
    r_norm = np.linalg.norm(r, axis=-1)  # (M, B)
    dots = np.einsum("mbl,bl->mb", r, centroid)
    denom = r_norm * c_norm[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0.0, dots / np.where(denom > 0.0, denom, 1.0), 0.0)
    disp = (1.0 - cos).mean(axis=0)
    return float(disp[0]) if single else disp


def _entropy(p: np.ndarray) -> np.ndarray:
    q = np.maximum(p, PROB_FLOOR)
    return -(p * np.log(q)).sum(axis=-1)


def dispersion_prob(preds: np.ndarray) -> np.ndarray:
    """Generalized Jensen-Shannon divergence of M predictions with uniform
    weights: H(mean) - mean(H), in nats; bounded by [0, log M].

    Accepts (M, K) or (M, B, K); returns float or (B,).
    """
    p = np.asarray(preds, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p = p[:, None, :]
    if p.shape[0] < 2:
        raise ValueError("need at least 2 predictions")
    jsd = _entropy(p.mean(axis=0)) - _entropy(p).mean(axis=0)
    jsd = np.maximum(jsd, 0.0)
    return float(jsd[0]) if single else jsd


# ---------------------------------------------------------------------------
# Quartile / correlation analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxStats:
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float


@dataclass(frozen=True)
class QuartileAnalysis:
    groups: list[BoxStats]
    pcc: float
    pcc_defined: bool


def pearson_corr(x, y):
    """Pearson correlation; undefined (nan, False) when either side has zero
    variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        return float("nan"), False
    return float((xc * yc).sum() / (sx * sy)), True


def _box(values: np.ndarray) -> BoxStats:
    return BoxStats(
        count=int(values.size),
        minimum=float(values.min()),
        q1=float(np.percentile(values, 25)),
        median=float(np.percentile(values, 50)),
        q3=float(np.percentile(values, 75)),
        maximum=float(values.max()),
    )


def quartile_analysis(nll_per_instance, dispersion_per_instance) -> QuartileAnalysis:
    """Group instances into four equal-size groups by NLL order statistics
    (ties broken by input order) and summarize the dispersion of each group;
    also the Pearson correlation between NLL and dispersion."""
    nll_v = np.asarray(nll_per_instance, dtype=np.float64)
    disp = np.asarray(dispersion_per_instance, dtype=np.float64)
    if nll_v.size < 4:
        raise ValueError("need at least 4 instances for quartile groups")
    order = np.argsort(nll_v, kind="stable")
    groups = [_box(disp[part]) for part in np.array_split(order, 4)]
    pcc, defined = pearson_corr(nll_v, disp)
    return QuartileAnalysis(groups=groups, pcc=pcc, pcc_defined=defined)


# ---------------------------------------------------------------------------
# Ensembling and per-class diagnostics
# ---------------------------------------------------------------------------

def ensemble_predict(
    x: np.ndarray,
    posterior: SwagPosterior,
    w: np.ndarray,
    b: np.ndarray,
    num_samples: int,
    rng: np.random.Generator,
    activation: str = "relu",
) -> np.ndarray:
    """Average the softmax predictions of num_samples posterior draws."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    x = np.atleast_2d(x)
    out = np.zeros((len(x), w.shape[1]))
    for _ in range(num_samples):
        theta = sample_theta(posterior, rng)
        out += softmax(classifier_logits(w, b, features(theta, x, activation)))
    return out / num_samples


@dataclass(frozen=True)
class PerClassDiagnostics:
    weight_norms: np.ndarray  # (K,) classifier row norms
    marginal: np.ndarray  # (K,) mean predicted probability per class
    bins: list[ReliabilityBin]


def per_class_diagnostics(
    w: np.ndarray, probs: np.ndarray, labels: np.ndarray, n_bins: int = 15
) -> PerClassDiagnostics:
    """Classifier weight norm per class, the marginal likelihood of each
    class under the test predictions, and the reliability-diagram table."""
    return PerClassDiagnostics(
        weight_norms=np.linalg.norm(w, axis=0),
        marginal=probs.mean(axis=0),
        bins=reliability_bins(probs, labels, n_bins),
    )


# ---------------------------------------------------------------------------
# Report container and serialization
# ---------------------------------------------------------------------------

_REPORT_SCALARS = ("acc_all", "acc_many", "acc_medium", "acc_few", "nll", "ece")


@dataclass
class MetricsReport:
    acc_all: float
    acc_many: float | None
    acc_medium: float | None
    acc_few: float | None
    nll: float
    ece: float
    bins: list[ReliabilityBin] = field(default_factory=list)
    pcc_repr: float | None = None
    pcc_prob: float | None = None
    per_class_weight_norm: list[float] | None = None
    per_class_marginal: list[float] | None = None

    def to_json_dict(self) -> dict:
        """Stable key order; absent metrics are omitted entirely."""
        out = {}
        for key in _REPORT_SCALARS:
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        out["bins"] = [[b.count, b.mean_confidence, b.accuracy] for b in self.bins]
        for key in ("pcc_repr", "pcc_prob", "per_class_weight_norm", "per_class_marginal"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    def csv_rows(self) -> list[tuple[str, float]]:
        return [
            (key, getattr(self, key))
            for key in _REPORT_SCALARS
            if getattr(self, key) is not None
        ]


def evaluate_probs(
    probs: np.ndarray,
    labels: np.ndarray,
    class_splits: list[str] | None,
    n_bins: int = 15,
) -> MetricsReport:
    """Bundle accuracy/NLL/ECE for a matrix of predictions."""
    acc = accuracy(probs, labels, class_splits)
    ece_value, bins = ece(probs, labels, n_bins)
    return MetricsReport(
        acc_all=acc["all"],
        acc_many=acc.get(MANY),
        acc_medium=acc.get(MEDIUM),
        acc_few=acc.get(FEW),
        nll=nll(probs, labels),
        ece=ece_value,
        bins=bins,
    )
