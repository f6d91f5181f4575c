"""Per-class Gaussian-mixture prototypes over concept vectors.

Mixtures are fitted with k-means++ initialization followed by EM with full
covariances (ridge-regularized each M-step, with an automatic diagonal
fallback when data is scarce). Fitted components cache their Cholesky
factor and log-determinant so likelihood scoring, Mahalanobis distances and
delta decompositions never re-factorize. Everything is deterministic given
(data, seed); ties always resolve to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InputError, NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids (k,m), labels (n,)). Empty clusters are reseeded to
    the point farthest from its assigned centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise InputError("points must be a samples x dim matrix", ndim=pts.ndim)
    n = pts.shape[0]
    if n < k:
        raise InputError("fewer samples than clusters", samples=n, k=k)
    if np.unique(pts, axis=0).shape[0] < k:
        raise InputError("fewer distinct points than clusters", k=k)
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(pts, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_distances(pts, centroids)
        labels = d2.argmin(axis=1)
        dist_to_own = d2[np.arange(n), labels]
        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = pts[members].mean(axis=0)
            else:
                farthest = int(np.argmax(dist_to_own))
                new_centroids[j] = pts[farthest]
                labels[farthest] = j
                dist_to_own[farthest] = 0.0
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < tol:
            break
    labels = _sq_distances(pts, centroids).argmin(axis=1)
    return centroids, labels


def _kmeanspp_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = pts.shape[0]
    centroids = np.empty((k, pts.shape[1]), dtype=np.float64)
    centroids[0] = pts[int(rng.integers(n))]
    d2 = _sq_distances(pts, centroids[:1]).min(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # remaining mass is zero: pick any point not yet a centroid
            chosen = int(rng.integers(n))
        else:
            chosen = int(rng.choice(n, p=d2 / total))
        centroids[j] = pts[chosen]
        d2 = np.minimum(d2, _sq_distances(pts, centroids[j : j + 1]).min(axis=1))
    return centroids


def _sq_distances(pts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@dataclass(frozen=True)
class PrototypeComponent:
    """One Gaussian of a class mixture, with cached Cholesky factor."""

    weight: float
    mean: np.ndarray
    covariance: np.ndarray
    chol: np.ndarray = field(repr=False, default=None)
    log_det: float = 0.0

    @staticmethod
    def create(weight: float, mean: np.ndarray, covariance: np.ndarray) -> "PrototypeComponent":
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(covariance, dtype=np.float64)
        if weight <= 0:
            raise NumericalError("component weight must be positive", weight=weight)
        if not np.allclose(cov, cov.T, atol=1e-7):
            raise NumericalError("covariance must be symmetric within 1e-7")
        try:
            chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError("covariance is not positive definite") from exc
        if not np.allclose(chol @ chol.T, cov, atol=1e-5):
            raise NumericalError("Cholesky factor does not reproduce covariance")
        log_det = 2.0 * float(np.log(np.diag(chol)).sum())
        return PrototypeComponent(float(weight), mean, cov, chol, log_det)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_pdf(self, v: np.ndarray) -> float:
        delta = np.asarray(v, dtype=np.float64) - self.mean
        if delta.shape != self.mean.shape:
            raise InputError(
                "dimension mismatch", vector_dim=delta.shape, component_dim=self.mean.shape
            )
        s = linalg.solve_triangular(self.chol, delta, lower=True)
        return -0.5 * (self.dim * LOG_2PI + self.log_det + float(s @ s))

    def precision(self) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), np.eye(self.dim))


@dataclass(frozen=True)
class PrototypeModel:
    """Gaussian mixture over one class's concept vectors."""

    class_id: int
    layer_index: int
    method: str
    components: tuple[PrototypeComponent, ...]
    closest_training_index: tuple[int, ...] = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.components:
            raise InputError("model needs at least one component")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise NumericalError("component weights must sum to 1", total=total)
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise InputError("components disagree on dimension", dims=sorted(dims))

    @property
    def dim(self) -> int:
        return self.components[0].dim


def fit_gmm(
    points: np.ndarray,
    k: int,
    seed: int,
    reg: float = 1e-6,
    max_iter: int = 200,
    tol: float = 1e-6,
    class_id: int = 0,
    layer_index: int = -1,
    method: str = "",
) -> PrototypeModel:
    """EM fit of a k-component full-covariance mixture, k-means initialized.

    Degenerate data (all points identical) collapses to a single component
    with covariance reg*I and a warning flag in the metadata.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise InputError("points must be a samples x dim matrix", ndim=pts.ndim)
    n, m = pts.shape
    if n < k:
        raise InputError("fewer samples than mixture components", samples=n, k=k)
    if n < 2:
        raise InputError("need at least 2 samples for covariance estimation", samples=n)
    meta = {"seed": seed, "reg": reg, "k": k, "warnings": []}
    if np.all(pts == pts[0]):
        comp = PrototypeComponent.create(1.0, pts[0], reg * np.eye(m))
        meta["warnings"].append("degenerate-data")
        meta.update(iterations=0, converged=True, covariance_type="full")
        return PrototypeModel(class_id, layer_index, method, (comp,), (), meta)

    diagonal = n < 2 * m
    meta["covariance_type"] = "diag" if diagonal else "full"
    if diagonal:
        meta["warnings"].append("diagonal-fallback")

    centroids, labels = kmeans(pts, k, seed)
    weights = np.empty(k)
    means = np.empty((k, m))
    covs = np.empty((k, m, m))
    for j in range(k):
        members = labels == j
        count = int(members.sum())
        weights[j] = count / n
        means[j] = centroids[j]
        covs[j] = _estimate_cov(pts[members], centroids[j], reg, diagonal) if count else reg * np.eye(m)
    weights = weights / weights.sum()

    history: list[float] = []
    converged = False
    iterations = 0
    for iteration in range(max_iter):
        iterations = iteration + 1
        log_resp, ll = _e_step(pts, weights, means, covs)
        history.append(ll)
        resp = np.exp(log_resp)
        counts = resp.sum(axis=0)
        counts = np.maximum(counts, 1e-300)
        weights = counts / counts.sum()
        for j in range(k):
            # sum(axis=0) keeps the all-ones case bit-identical to np.mean
            means[j] = (resp[:, j : j + 1] * pts).sum(axis=0) / counts[j]
            diff = pts - means[j]
            cov = (diff * resp[:, j : j + 1]).T @ diff / counts[j]
            covs[j] = _ridge(cov, reg, diagonal)
        if len(history) >= 2:
            prev, cur = history[-2], history[-1]
            if (cur - prev) / max(abs(cur), abs(prev), 1.0) < tol:
                converged = True
                break
    _, final_ll = _e_step(pts, weights, means, covs)
    history.append(final_ll)
    meta.update(iterations=iterations, converged=converged, log_likelihood_history=history)

    components = tuple(
        PrototypeComponent.create(weights[j], means[j], covs[j]) for j in range(k)
    )
    closest = tuple(
        int(np.argmin(np.einsum("ij,ij->i", pts - means[j], pts - means[j])))
        for j in range(k)
    )
    return PrototypeModel(class_id, layer_index, method, components, closest, meta)


def _estimate_cov(members: np.ndarray, mean: np.ndarray, reg: float, diagonal: bool) -> np.ndarray:
    diff = members - mean
    cov = diff.T @ diff / members.shape[0]
    return _ridge(cov, reg, diagonal)


def _ridge(cov: np.ndarray, reg: float, diagonal: bool) -> np.ndarray:
    m = cov.shape[0]
    if diagonal:
        cov = np.diag(np.diag(cov))
    trace = float(np.trace(cov))
    scale = reg * (trace / m) if trace > 0 else reg
    return cov + scale * np.eye(m)


def _e_step(
    pts: np.ndarray, weights: np.ndarray, means: np.ndarray, covs: np.ndarray
) -> tuple[np.ndarray, float]:
    """Log responsibilities and total log-likelihood for the current parameters."""
    n, m = pts.shape
    k = weights.shape[0]
    log_prob = np.empty((n, k))
    for j in range(k):
        chol = linalg.cholesky(covs[j], lower=True)
        diff = (pts - means[j]).T
        sol = linalg.solve_triangular(chol, diff, lower=True)
        log_det = 2.0 * np.log(np.diag(chol)).sum()
        log_prob[:, j] = -0.5 * (m * LOG_2PI + log_det + (sol * sol).sum(axis=0))
    weighted = log_prob + np.log(weights)[None, :]
    norm = _logsumexp(weighted, axis=1)
    return weighted - norm[:, None], float(norm.sum())


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    peak = a.max(axis=axis, keepdims=True)
    out = peak + np.log(np.exp(a - peak).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_likelihood_class(model: PrototypeModel, v: np.ndarray) -> float:
    """Mixture log-likelihood via log-sum-exp over weighted component densities."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.dim,):
        raise InputError("dimension mismatch", vector_dim=list(v.shape), model_dim=model.dim)
    terms = np.array([np.log(c.weight) + c.log_pdf(v) for c in model.components])
    peak = terms.max()
    return float(peak + np.log(np.exp(terms - peak).sum()))


def assign_prototype(
    models: dict[int, PrototypeModel] | list[PrototypeModel],
    v: np.ndarray,
    weighted: bool = True,
) -> tuple[int, int]:
    """Most likely (class, component) for a concept vector.

    `weighted=True` ranks by log(weight * density); `weighted=False` drops the
    mixture weight. Ties go to the lowest (class, component) pair.
    """
    if isinstance(models, dict):
        items = sorted(models.items())
    else:
        items = sorted((m.class_id, m) for m in models)
    if not items:
        raise InputError("no prototype models given")
    best = (items[0][0], 0)
    best_score = -np.inf
    for class_id, model in items:
        for idx, comp in enumerate(model.components):
            score = comp.log_pdf(v)
            if weighted:
                score += np.log(comp.weight)
            if score > best_score:
                best_score = score
                best = (class_id, idx)
    return best


def mahalanobis(component: PrototypeComponent, v: np.ndarray) -> float:
    """Covariance-weighted distance via the cached Cholesky factor."""
    delta = np.asarray(v, dtype=np.float64) - component.mean
    if delta.shape != component.mean.shape:
        raise InputError("dimension mismatch")
    s = linalg.solve_triangular(component.chol, delta, lower=True)
    return float(np.sqrt(s @ s))


def euclidean(component: PrototypeComponent, v: np.ndarray) -> float:
    delta = np.asarray(v, dtype=np.float64) - component.mean
    if delta.shape != component.mean.shape:
        raise InputError("dimension mismatch")
    return float(np.sqrt(delta @ delta))


@dataclass(frozen=True)
class DeltaExplanation:
    """Covariance-aware decomposition of a sample's deviation from a prototype."""

    delta: np.ndarray
    labels: tuple[str, ...]  # overused | underused | similar, per concept
    intra: np.ndarray  # delta_i * P_ii * delta_i, always >= 0
    inter: np.ndarray  # delta_i * P_ij * delta_j for i != j (zero diagonal)
    total: float  # delta' Sigma^-1 delta = squared Mahalanobis distance


def explain_delta(
    component: PrototypeComponent, v: np.ndarray, similar_band: float = 0.02
) -> DeltaExplanation:
    """Label concepts over/underused and split the Mahalanobis form into
    intra- and inter-concept terms."""
    delta = np.asarray(v, dtype=np.float64) - component.mean
    if delta.shape != component.mean.shape:
        raise InputError("dimension mismatch")
    precision = component.precision()
    contrib = np.outer(delta, delta) * precision
    intra = np.diag(contrib).copy()
    inter = contrib - np.diag(intra)
    labels = tuple(
        "overused" if d > similar_band else "underused" if d < -similar_band else "similar"
        for d in delta
    )
    total = float(delta @ precision @ delta)
    return DeltaExplanation(delta, labels, intra, inter, total)


def class_similarity_matrix(
    models: list[PrototypeModel], component_index: int = 0
) -> np.ndarray:
    """Cosine similarities between class prototype means (diagonal forced to 1)."""
    means = []
    for model in models:
        if component_index >= len(model.components):
            raise InputError(
                "component index out of range",
                class_id=model.class_id,
                components=len(model.components),
            )
        mu = model.components[component_index].mean
        norm = np.linalg.norm(mu)
        if norm == 0:
            raise NumericalError("zero-norm prototype mean", class_id=model.class_id)
        means.append(mu / norm)
    mat = np.array([[float(a @ b) for b in means] for a in means])
    np.fill_diagonal(mat, 1.0)
    return mat


@dataclass(frozen=True)
class OutlierClusters:
    """Low-likelihood training samples grouped by k-means over their vectors."""

    clusters: tuple[tuple[int, ...], ...]
    threshold: float
    ungrouped: bool = False


def outlier_clusters(
    points: np.ndarray, model: PrototypeModel, percentile: float, k: int, seed: int
) -> OutlierClusters:
    """Group the class's lowest-likelihood training samples into clusters."""
    if not 0 < percentile < 100:
        if percentile == 0:
            return OutlierClusters((), float("-inf"))
        raise InputError("percentile must lie in (0, 100)", percentile=percentile)
    pts = np.asarray(points, dtype=np.float64)
    scores = np.array([log_likelihood_class(model, p) for p in pts])
    threshold = float(np.percentile(scores, percentile))
    flagged = np.flatnonzero(scores < threshold)
    if flagged.size == 0:
        return OutlierClusters((), threshold)
    if flagged.size < k:
        return OutlierClusters((tuple(int(i) for i in flagged),), threshold, ungrouped=True)
    try:
        _, labels = kmeans(pts[flagged], k, seed)
    except InputError:
        return OutlierClusters((tuple(int(i) for i in flagged),), threshold, ungrouped=True)
    clusters = tuple(
        tuple(int(i) for i in flagged[labels == j]) for j in range(k) if (labels == j).any()
    )
    return OutlierClusters(clusters, threshold)
