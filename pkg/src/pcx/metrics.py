"""Evaluation metrics for prototype quality.

Faithfulness (concept-deletion drop curve), stability (Hungarian-matched
prototype cosine across folds), sparseness (distance of |mean| from the
uniform direction), coverage (hold-out assignment accuracy over known
sub-strategies) and outlier detection (rank AUC on likelihood scores),
plus the three-regime clustering comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attribution import ConceptVector
from .engine import NetworkSpec, forward, forward_from
from .errors import InputError, NumericalError
from .prototypes import (
    PrototypeModel,
    assign_prototype,
    fit_gmm,
    kmeans,
    log_likelihood_class,
)


def hungarian(cost: np.ndarray) -> tuple[list[int], float]:
    """Solve the square assignment problem, minimizing total cost in O(n^3).

    Returns (assignment, total) where assignment[row] = column. Shortest
    augmenting path formulation with row/column potentials.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InputError("cost matrix must be square", shape=list(c.shape))
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    way = np.zeros(n + 1, dtype=np.int64)
    match = np.full(n + 1, 0, dtype=np.int64)  # match[col] = row (1-based), 0 = free
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assignment = [0] * n
    for j in range(1, n + 1):
        assignment[match[j] - 1] = j - 1
    total = float(sum(c[i, assignment[i]] for i in range(n)))
    return assignment, total


def outlier_auc(in_scores, out_scores) -> float:
    """Rank-statistic AUC (Mann-Whitney) with ties counted as 0.5.

    Higher scores must mean "more in-distribution"; the returned AUC is the
    probability that a random in-distribution score ranks above a random
    out-of-distribution score.
    """
    a = np.asarray(in_scores, dtype=np.float64)
    b = np.asarray(out_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise InputError("both score lists must be non-empty", n_in=a.size, n_out=b.size)
    combined = np.concatenate([a, b])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericalError("cosine of zero-norm vector")
    return float(a @ b / (na * nb))


def faithfulness(
    net: NetworkSpec,
    samples: list[np.ndarray],
    model: PrototypeModel,
    layer_index: int,
    fraction_removed: float = 1.0,
    concept_fn=None,
) -> float:
    """Area under the logit drop curve when deleting concepts in prototype order.

    For each sample the nearest component of `model` is found (weighted log
    density on the sample's concept vector), concepts are zeroed at the layer
    in descending order of that component's mean, and the class logit is
    re-read after every removal. The drop d(t) = y(0) - y(t) is integrated
    over the removal fraction t by the trapezoidal rule and averaged over
    samples.
    """
    if not 0 < fraction_removed <= 1:
        raise InputError("fraction_removed must lie in (0, 1]", fraction_removed=fraction_removed)
    if concept_fn is None:
        raise InputError("faithfulness needs a concept attribution function")
    aucs = []
    for x in samples:
        trace = forward(net, x)
        latent = trace.activation(layer_index)
        m = latent.shape[0]
        vec: ConceptVector = concept_fn(net, x, model.class_id, layer_index)
        comp_idx = _nearest_component(model, vec.values)
        order = np.argsort(-model.components[comp_idx].mean, kind="stable")
        steps = max(1, int(round(fraction_removed * m)))
        y0 = float(trace.logits[model.class_id])
        drops = [0.0]
        patched = latent.copy()
        for step in range(steps):
            concept = order[step]
            if patched.ndim == 1:
                patched[concept] = 0.0
            else:
                patched[concept, :, :] = 0.0
            logits = forward_from(net, layer_index, patched)
            drops.append(y0 - float(logits[model.class_id]))
        t = np.arange(steps + 1) / m
        aucs.append(float(np.trapezoid(np.asarray(drops), t)))
    return float(np.mean(aucs))


def _nearest_component(model: PrototypeModel, v: np.ndarray) -> int:
    scores = [np.log(c.weight) + c.log_pdf(v) for c in model.components]
    return int(np.argmax(scores))


def stability(
    points: np.ndarray, k: int = 5, folds: int = 10, seed: int = 0
) -> tuple[float, list[float]]:
    """Mean Hungarian-matched cosine similarity of prototypes across data folds.

    Fits `k` prototypes on each of `folds` disjoint subsets (contiguous in
    index order, so callers control the shuffle) and matches every fold pair
    on cost 1 - cosine. Returns (score, individual matched values).
    """
    pts = np.asarray(points, dtype=np.float64)
    if folds < 2:
        raise InputError("need at least 2 folds", folds=folds)
    if pts.shape[0] < folds * k:
        raise InputError(
            "every fold needs at least k samples", samples=pts.shape[0], folds=folds, k=k
        )
    fold_means = []
    for chunk in np.array_split(np.arange(pts.shape[0]), folds):
        fold_pts = pts[chunk]
        if np.all(fold_pts == fold_pts[0]):
            raise NumericalError("degenerate fold: all points identical")
        model = fit_gmm(fold_pts, k, seed)
        fold_means.append([c.mean for c in model.components])
    values: list[float] = []
    for a in range(folds):
        for b in range(a + 1, folds):
            cost = np.array(
                [[1.0 - cosine(ma, mb) for mb in fold_means[b]] for ma in fold_means[a]]
            )
            assignment, _ = hungarian(cost)
            values.extend(1.0 - cost[i, assignment[i]] for i in range(len(assignment)))
    return float(np.mean(values)), values


def sparseness(model: PrototypeModel) -> tuple[float, list[float]]:
    """1 - cosine(|mean|, uniform direction), averaged over components."""
    values = []
    for comp in model.components:
        mu = np.abs(comp.mean)
        if np.linalg.norm(mu) == 0:
            raise NumericalError("zero prototype mean", class_id=model.class_id)
        uniform = np.ones_like(mu) / np.sqrt(mu.shape[0])
        values.append(1.0 - cosine(mu, uniform))
    return float(np.mean(values)), values


def coverage(
    train_by_strategy: dict[int, np.ndarray],
    test_by_strategy: dict[int, np.ndarray],
    seed: int = 0,
    k: int = 1,
    reg: float = 1e-6,
) -> float:
    """Hold-out accuracy of assigning samples to known sub-strategies."""
    if not train_by_strategy:
        raise InputError("no strategies given")
    models = {}
    for strategy, pts in sorted(train_by_strategy.items()):
        if np.asarray(pts).shape[0] == 0:
            raise InputError("empty strategy", strategy=strategy)
        models[strategy] = fit_gmm(pts, k, seed, reg=reg, class_id=strategy)
    hits = 0
    total = 0
    for strategy, pts in sorted(test_by_strategy.items()):
        for v in np.asarray(pts):
            assigned, _ = assign_prototype(models, v)
            hits += assigned == strategy
            total += 1
    if total == 0:
        raise InputError("empty hold-out set")
    return hits / total


def compare_clusterings(
    train_by_strategy: dict[int, np.ndarray],
    test_by_strategy: dict[int, np.ndarray],
    out_points: np.ndarray | None,
    k: int = 1,
    seed: int = 0,
    reg: float = 1e-6,
) -> dict[str, dict[str, float]]:
    """Coverage and outlier AUC under three assignment regimes.

    kmeans-euclid: nearest k-means centroid; gmm-euclid: nearest EM-updated
    mean; gmm-loglik: weighted component density / class log-likelihood.
    """
    strategies = sorted(train_by_strategy)
    centroids_km = {}
    models = {}
    for s in strategies:
        pts = np.asarray(train_by_strategy[s], dtype=np.float64)
        centroids_km[s], _ = kmeans(pts, k, seed)
        models[s] = fit_gmm(pts, k, seed, reg=reg, class_id=s)
    means_gmm = {s: np.array([c.mean for c in models[s].components]) for s in strategies}

    def nearest_centroid(centers: dict[int, np.ndarray], v: np.ndarray) -> int:
        best, best_d = None, np.inf
        for s in strategies:
            for mu in centers[s]:
                d = float(np.linalg.norm(v - mu))
                if d < best_d:
                    best, best_d = s, d
        return best

    def min_distance(centers: dict[int, np.ndarray], v: np.ndarray) -> float:
        return min(float(np.linalg.norm(v - mu)) for s in strategies for mu in centers[s])

    report: dict[str, dict[str, float]] = {}
    test_items = [
        (s, np.asarray(test_by_strategy[s], dtype=np.float64))
        for s in sorted(test_by_strategy)
    ]

    for regime, assign_fn, score_fn in (
        (
            "kmeans-euclid",
            lambda v: nearest_centroid(centroids_km, v),
            lambda v: -min_distance(centroids_km, v),
        ),
        (
            "gmm-euclid",
            lambda v: nearest_centroid(means_gmm, v),
            lambda v: -min_distance(means_gmm, v),
        ),
        (
            "gmm-loglik",
            lambda v: assign_prototype(models, v)[0],
            lambda v: max(log_likelihood_class(models[s], v) for s in strategies),
        ),
    ):
        hits = total = 0
        in_scores = []
        for s, pts in test_items:
            for v in pts:
                hits += assign_fn(v) == s
                total += 1
                in_scores.append(score_fn(v))
        entry = {"coverage": hits / total}
        if out_points is not None and len(out_points) > 0:
            out_scores = [score_fn(np.asarray(v, dtype=np.float64)) for v in out_points]
            entry["outlier_auc"] = outlier_auc(in_scores, out_scores)
        report[regime] = entry
    return report


@dataclass(frozen=True)
class EvalReport:
    """One metric's scores with provenance; aggregate is the per-layer mean."""

    metric: str
    per_layer: dict[int, float]
    aggregate: float
    standard_error: float
    config: dict = field(default_factory=dict)
    sample_counts: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.per_layer:
            mean = float(np.mean(list(self.per_layer.values())))
            if abs(mean - self.aggregate) > 1e-9:
                raise NumericalError(
                    "aggregate must equal the mean of per-layer scores",
                    aggregate=self.aggregate,
                    mean=mean,
                )
        if self.standard_error < 0:
            raise NumericalError("standard error must be >= 0")

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "per_layer": {str(k): v for k, v in sorted(self.per_layer.items())},
            "aggregate": self.aggregate,
            "standard_error": self.standard_error,
            "config": self.config,
            "sample_counts": self.sample_counts,
            "extras": self.extras,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EvalReport":
        return EvalReport(
            metric=doc["metric"],
            per_layer={int(k): float(v) for k, v in doc["per_layer"].items()},
            aggregate=float(doc["aggregate"]),
            standard_error=float(doc["standard_error"]),
            config=doc.get("config", {}),
            sample_counts=doc.get("sample_counts", {}),
            extras=doc.get("extras", {}),
        )


def standard_error(values) -> float:
    """SE of the mean; zero for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size <= 1:
        return 0.0
    return float(arr.std(ddof=1) / np.sqrt(arr.size))


def render_table(rows: list[dict], columns: list[str], row_key: str) -> str:
    """Aligned text table: one row per dict, metric values by column name."""
    headers = [row_key] + columns
    body = []
    for row in rows:
        body.append(
            [str(row.get(row_key, ""))]
            + [_fmt(row.get(c)) for c in columns]
        )
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for r in body:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))
    return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
