"""Out-of-distribution scorers.

Five scoring functions, all oriented so that HIGHER means more
in-distribution: max softmax probability, the (negative) energy score,
a tied-covariance Mahalanobis baseline on pooled features, mixture
log-likelihood of the predicted class's prototypes (pcx-gmm) and negative
Euclidean distance to the predicted class's closest prototype (pcx-e).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from .attribution import activation_pool, normalize
from .engine import NetworkSpec, forward
from .errors import InputError
from .metrics import outlier_auc
from .prototypes import PrototypeModel, euclidean, log_likelihood_class

SCORER_KINDS = ("msp", "energy", "mahalanobis-baseline", "pcx-gmm", "pcx-e")


def score_msp(logits: np.ndarray) -> float:
    """Max softmax probability, computed with max-subtraction for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size < 2:
        raise InputError("need at least two logits", count=logits.size)
    shifted = logits - logits.max()
    probs = np.exp(shifted)
    return float(probs.max() / probs.sum())


def score_energy(logits: np.ndarray, temperature: float = 1.0) -> float:
    """Negative energy T*log(sum(exp(y/T))); higher = more in-distribution."""
    if temperature <= 0:
        raise InputError("temperature must be positive", temperature=temperature)
    logits = np.asarray(logits, dtype=np.float64) / temperature
    peak = logits.max()
    return float(temperature * (peak + np.log(np.exp(logits - peak).sum())))


@dataclass(frozen=True)
class MahalanobisStats:
    """Per-class feature means with one tied covariance over all classes."""

    class_means: np.ndarray  # (classes, dim)
    chol: np.ndarray  # lower Cholesky of the tied covariance


def fit_mahalanobis(features_by_class: dict[int, np.ndarray], reg: float = 1e-6) -> MahalanobisStats:
    classes = sorted(features_by_class)
    if not classes:
        raise InputError("no feature classes given")
    means = []
    centered = []
    for c in classes:
        feats = np.asarray(features_by_class[c], dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise InputError("features must be a non-empty samples x dim matrix", class_id=c)
        mu = feats.mean(axis=0)
        means.append(mu)
        centered.append(feats - mu)
    stacked = np.concatenate(centered, axis=0)
    m = stacked.shape[1]
    cov = stacked.T @ stacked / stacked.shape[0]
    trace = float(np.trace(cov))
    cov = cov + (reg * (trace / m) if trace > 0 else reg) * np.eye(m)
    chol = linalg.cholesky(cov, lower=True)
    return MahalanobisStats(np.array(means), chol)


def score_mahalanobis_baseline(stats: MahalanobisStats, feature: np.ndarray) -> float:
    """Max over classes of the negative tied-covariance Mahalanobis distance."""
    feature = np.asarray(feature, dtype=np.float64)
    best = -np.inf
    for mu in stats.class_means:
        s = linalg.solve_triangular(stats.chol, feature - mu, lower=True)
        best = max(best, -float(np.sqrt(s @ s)))
    return best


def score_pcx_gmm(
    models: dict[int, PrototypeModel], predicted_class: int, v: np.ndarray
) -> float:
    """Mixture log-likelihood of the predicted class at the concept vector."""
    if predicted_class not in models:
        raise InputError("no prototype model for predicted class", predicted_class=predicted_class)
    return log_likelihood_class(models[predicted_class], v)


def score_pcx_e(
    models: dict[int, PrototypeModel], predicted_class: int, v: np.ndarray
) -> float:
    """Negative Euclidean distance to the predicted class's closest prototype."""
    if predicted_class not in models:
        raise InputError("no prototype model for predicted class", predicted_class=predicted_class)
    return -min(euclidean(c, v) for c in models[predicted_class].components)


@dataclass(frozen=True)
class OodScorer:
    """A fitted scorer mapping (net, sample) to an in-distribution score."""

    kind: str
    temperature: float = 1.0
    layer_index: int = -1
    models: dict[int, PrototypeModel] | None = None
    stats: MahalanobisStats | None = None
    concept_fn: Callable | None = None

    def __post_init__(self):
        if self.kind not in SCORER_KINDS:
            raise InputError("unknown scorer kind", kind=self.kind, valid=list(SCORER_KINDS))
        if self.temperature <= 0:
            raise InputError("temperature must be positive", temperature=self.temperature)
        if self.kind in ("pcx-gmm", "pcx-e") and not self.models:
            raise InputError("pcx scorers need fitted prototype models", kind=self.kind)
        if self.kind == "mahalanobis-baseline" and self.stats is None:
            raise InputError("mahalanobis baseline needs fitted statistics")

    def score(self, net: NetworkSpec, x: np.ndarray) -> float:
        trace = forward(net, x)
        logits = trace.logits
        if self.kind == "msp":
            return score_msp(logits)
        if self.kind == "energy":
            return score_energy(logits, self.temperature)
        if self.kind == "mahalanobis-baseline":
            feature = activation_pool(trace, self.layer_index, "sum").values
            return score_mahalanobis_baseline(self.stats, feature)
        predicted = int(np.argmax(logits))
        v = self.concept_fn(net, x, predicted, self.layer_index).values
        if self.kind == "pcx-gmm":
            return score_pcx_gmm(self.models, predicted, v)
        return score_pcx_e(self.models, predicted, v)


def default_concept_fn(epsilon: float = 1e-9, method: str = "lrp-eps"):
    """Concept-vector extractor matching a prototype store's configuration."""
    from . import attribution

    def fn(net: NetworkSpec, x: np.ndarray, class_index: int, layer_index: int):
        if method == "lrp-eps":
            vec = attribution.lrp_epsilon(net, x, class_index, layer_index, epsilon)
        elif method == "lrp-composite":
            vec = attribution.lrp_composite(net, x, class_index, layer_index, epsilon)
        elif method == "input-x-gradient":
            vec = attribution.input_x_gradient(net, x, class_index, layer_index)
        elif method == "guided-backprop":
            vec = attribution.guided_backprop(net, x, class_index, layer_index)
        elif method in ("activation-sum", "activation-max"):
            trace = forward(net, x)
            vec = attribution.activation_pool(
                trace, layer_index, "max" if method == "activation-max" else "sum"
            )
        else:
            raise InputError("unknown attribution method", method=method)
        return normalize(vec)

    return fn


def run_ood_benchmark(
    net: NetworkSpec,
    scorer: OodScorer,
    in_samples: list[np.ndarray],
    out_samples: list[np.ndarray],
) -> dict:
    """Score both sample sets and report the rank AUC (higher = better detection)."""
    if not in_samples or not out_samples:
        raise InputError(
            "both sample sets must be non-empty", n_in=len(in_samples), n_out=len(out_samples)
        )
    in_scores = [scorer.score(net, x) for x in in_samples]
    out_scores = [scorer.score(net, x) for x in out_samples]
    return {
        "scorer": scorer.kind,
        "auc": outlier_auc(in_scores, out_scores),
        "in_scores": in_scores,
        "out_scores": out_scores,
    }
