"""Concept attribution vectors and concept-conditional heatmaps.

Implemented methods: LRP with the epsilon rule, an LRP composite (z-plus in
conv/pool stages, epsilon in dense layers), Input x Gradient, GuidedBackprop
and plain activation pooling. Relevance propagation starts from a one-hot
logit seed and walks the layers backwards; at a chosen layer the latent
relevance is summed per channel to form the concept vector. Restricting the
backward pass to a single channel at that layer yields concept-conditional
input heatmaps.

Relevance arithmetic runs in float64 on the engine's float32 activations.
Bias relevance is absorbed, not redistributed: the epsilon-rule denominator
is the full forward pre-activation (bias included), so totals are conserved
exactly only on bias-free networks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .engine import (
    ActivationTrace,
    LayerSpec,
    NetworkSpec,
    _col2im,
    _im2col,
    _pad_for_pool,
    _pool_windows,
    forward,
    grad_from_trace,
)
from .errors import DegenerateVectorError, InputError, NumericalError

DEFAULT_EPSILON = 1e-9

METHODS = (
    "lrp-eps",
    "lrp-composite",
    "input-x-gradient",
    "guided-backprop",
    "activation-sum",
    "activation-max",
)


@dataclass(frozen=True)
class ConceptVector:
    """Per-sample concept attribution at one layer."""

    values: np.ndarray
    layer_index: int
    flavor: str  # "relevance" | "activation"
    method: str
    normalized: bool = False


@dataclass(frozen=True)
class ConceptBasis:
    """Identity basis (one concept per neuron/channel) or a CAV matrix U (n x m)."""

    mode: str = "identity"
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("identity", "matrix"):
            raise InputError("basis mode must be 'identity' or 'matrix'", mode=self.mode)
        if self.mode == "matrix":
            if self.matrix is None or self.matrix.ndim != 2:
                raise InputError("matrix basis needs a 2-d direction matrix")
            norms = np.linalg.norm(self.matrix, axis=0)
            if not np.allclose(norms, 1.0, atol=1e-5):
                raise InputError(
                    "basis columns must be unit norm",
                    column_norms=[float(n) for n in norms],
                )


@dataclass(frozen=True)
class Heatmap:
    """Input-shaped relevance map; concept_index None means the full explanation."""

    values: np.ndarray
    concept_index: int | None


def _stabilize(z: np.ndarray, epsilon: float) -> np.ndarray:
    # sign(0) = 1, as required for the stabilized denominator
    sign = np.where(z >= 0, 1.0, -1.0)
    return z + epsilon * sign


def _layer_rule(layer: LayerSpec, composite: bool) -> str:
    if layer.kind in ("conv2d", "avgpool2d") and composite:
        return "zplus"
    return "epsilon"


def _propagate_relevance(
    layer: LayerSpec,
    x_in: np.ndarray,
    z_out: np.ndarray,
    relevance: np.ndarray,
    rule: str,
    epsilon: float,
) -> np.ndarray:
    """Redistribute `relevance` at a layer's output onto its input."""
    kind = layer.kind
    if kind == "relu":
        return relevance
    if kind == "flatten":
        return relevance.reshape(x_in.shape)
    if kind == "maxpool2d":
        return _maxpool_relevance(layer, x_in, relevance)
    if kind == "dense":
        w = layer.weights.astype(np.float64)
        if rule == "zplus":
            wp, wn = np.maximum(w, 0), np.minimum(w, 0)
            xp, xn = np.maximum(x_in, 0), np.minimum(x_in, 0)
            denom = wp @ xp + wn @ xn
            s = np.where(denom != 0, relevance / np.where(denom == 0, 1.0, denom), 0.0)
            return xp * (wp.T @ s) + xn * (wn.T @ s)
        s = relevance / _stabilize(z_out, epsilon)
        return x_in * (w.T @ s)
    if kind == "conv2d":
        k, stride, pad = layer.kernel, layer.stride, layer.padding
        w_mat = layer.weights.reshape(layer.weights.shape[0], -1).astype(np.float64)
        if rule == "zplus":
            wp, wn = np.maximum(w_mat, 0), np.minimum(w_mat, 0)
            xp, xn = np.maximum(x_in, 0), np.minimum(x_in, 0)
            denom = wp @ _im2col(xp, k, stride, pad) + wn @ _im2col(xn, k, stride, pad)
            denom = denom.reshape(z_out.shape)
            s = np.where(denom != 0, relevance / np.where(denom == 0, 1.0, denom), 0.0)
            s_mat = s.reshape(s.shape[0], -1)
            rp = xp * _col2im(wp.T @ s_mat, x_in.shape, k, stride, pad)
            rn = xn * _col2im(wn.T @ s_mat, x_in.shape, k, stride, pad)
            return rp + rn
        s = relevance / _stabilize(z_out, epsilon)
        s_mat = s.reshape(s.shape[0], -1)
        return x_in * _col2im(w_mat.T @ s_mat, x_in.shape, k, stride, pad)
    if kind == "avgpool2d":
        k, stride, pad = layer.kernel, layer.stride, layer.padding
        scale = 1.0 / (k * k)
        if rule == "zplus":
            xp = np.maximum(x_in, 0)
            denom = _pool_windows(_pad_for_pool(xp, pad, 0.0), k, stride).sum(axis=3) * scale
            s = np.where(denom != 0, relevance / np.where(denom == 0, 1.0, denom), 0.0)
            return xp * _avgpool_backward(s, x_in.shape, k, stride, pad) * scale
        s = relevance / _stabilize(z_out, epsilon)
        return x_in * _avgpool_backward(s, x_in.shape, k, stride, pad) * scale
    raise InputError(f"no relevance rule for layer kind '{kind}'")


def _avgpool_backward(
    s: np.ndarray, in_shape: tuple[int, int, int], k: int, stride: int, pad: int
) -> np.ndarray:
    """Sum of s over the windows covering each input position."""
    c = in_shape[0]
    s_mat = s.reshape(c, -1)
    cols = np.ascontiguousarray(
        np.broadcast_to(s_mat[:, None, :], (c, k * k, s_mat.shape[1])).reshape(c * k * k, -1)
    )
    padded = (c, in_shape[1] + 2 * pad, in_shape[2] + 2 * pad)
    out = _col2im(cols, padded, k, stride, 0)
    if pad:
        out = out[:, pad : pad + in_shape[1], pad : pad + in_shape[2]]
    return out


def _maxpool_relevance(layer: LayerSpec, x_in: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    """Winner-take-all: relevance goes to the first maximal element per window."""
    k, stride, pad = layer.kernel, layer.stride, layer.padding
    xp = _pad_for_pool(x_in, pad, -np.inf)
    win = _pool_windows(xp, k, stride)
    winners = win.argmax(axis=3)
    out = np.zeros(xp.shape, dtype=relevance.dtype)
    c, ho, wo = relevance.shape
    ci, oi, oj = np.meshgrid(np.arange(c), np.arange(ho), np.arange(wo), indexing="ij")
    ki, kj = winners // k, winners % k
    np.add.at(out, (ci, oi * stride + ki, oj * stride + kj), relevance)
    if pad:
        out = out[:, pad : pad + x_in.shape[1], pad : pad + x_in.shape[2]]
    return out


def _lrp_backward(
    net: NetworkSpec,
    trace: ActivationTrace,
    class_index: int,
    stop_layer: int,
    composite: bool,
    epsilon: float,
    concept_mask: int | None = None,
    mask_layer: int | None = None,
) -> np.ndarray:
    """Propagate relevance from the logits down to `stop_layer`'s activation.

    If `concept_mask` is given, all channels except that one are zeroed once
    the pass reaches `mask_layer`.
    """
    if not 0 <= class_index < net.class_count:
        raise InputError(
            "class index out of range", class_index=class_index, class_count=net.class_count
        )
    relevance = np.zeros(net.class_count, dtype=np.float64)
    relevance[class_index] = float(trace.logits[class_index])
    for l in range(len(net.layers) - 1, stop_layer, -1):
        if mask_layer is not None and l == mask_layer:
            relevance = _mask_concept(relevance, concept_mask)
        layer = net.layers[l]
        relevance = _propagate_relevance(
            layer,
            trace.activation(l - 1).astype(np.float64),
            trace.activation(l).astype(np.float64),
            relevance,
            _layer_rule(layer, composite),
            epsilon,
        )
    if mask_layer is not None and mask_layer == stop_layer:
        relevance = _mask_concept(relevance, concept_mask)
    return relevance


def _mask_concept(relevance: np.ndarray, concept_index: int | None) -> np.ndarray:
    masked = np.zeros_like(relevance)
    if relevance.ndim == 1:
        masked[concept_index] = relevance[concept_index]
    else:
        masked[concept_index, :, :] = relevance[concept_index, :, :]
    return masked


def channel_sum(latent: np.ndarray) -> np.ndarray:
    """Aggregate a latent map to one value per channel (identity on vectors)."""
    if latent.ndim == 1:
        return latent
    return latent.reshape(latent.shape[0], -1).sum(axis=1)


def concept_count(net: NetworkSpec, layer_index: int) -> int:
    shape = net.activation_shape(layer_index)
    return shape[0]


def _check_concept_layer(net: NetworkSpec, layer_index: int) -> None:
    net.check_layer_index(layer_index)


def lrp_epsilon(
    net: NetworkSpec,
    x: np.ndarray,
    class_index: int,
    layer_index: int,
    epsilon: float = DEFAULT_EPSILON,
) -> ConceptVector:
    """Epsilon-rule relevance per concept at a layer, unnormalized."""
    if epsilon <= 0:
        raise InputError("epsilon must be positive", epsilon=epsilon)
    _check_concept_layer(net, layer_index)
    trace = forward(net, x)
    rel = _lrp_backward(net, trace, class_index, layer_index, False, epsilon)
    return ConceptVector(channel_sum(rel), layer_index, "relevance", "lrp-eps")


def lrp_composite(
    net: NetworkSpec,
    x: np.ndarray,
    class_index: int,
    layer_index: int,
    epsilon: float = DEFAULT_EPSILON,
) -> ConceptVector:
    """z-plus rule in conv/pool stages, epsilon rule in dense layers."""
    _check_concept_layer(net, layer_index)
    trace = forward(net, x)
    rel = _lrp_backward(net, trace, class_index, layer_index, True, epsilon)
    return ConceptVector(channel_sum(rel), layer_index, "relevance", "lrp-composite")


def input_x_gradient(
    net: NetworkSpec, x: np.ndarray, class_index: int, layer_index: int
) -> ConceptVector:
    """Latent activation times the exact logit gradient, summed per channel."""
    _check_concept_layer(net, layer_index)
    trace = forward(net, x)
    grad = grad_from_trace(net, trace, layer_index, class_index)
    prod = trace.activation(layer_index).astype(np.float64) * grad.astype(np.float64)
    return ConceptVector(channel_sum(prod), layer_index, "relevance", "input-x-gradient")


def guided_backprop(
    net: NetworkSpec, x: np.ndarray, class_index: int, layer_index: int
) -> ConceptVector:
    """Input x Gradient with negative top-gradients clamped at every ReLU."""
    _check_concept_layer(net, layer_index)
    trace = forward(net, x)
    grad = grad_from_trace(net, trace, layer_index, class_index, guided=True)
    prod = trace.activation(layer_index).astype(np.float64) * grad.astype(np.float64)
    return ConceptVector(channel_sum(prod), layer_index, "relevance", "guided-backprop")


def activation_pool(trace: ActivationTrace, layer_index: int, pool: str) -> ConceptVector:
    """Max- or sum-pool a layer's activation into a concept vector."""
    if pool not in ("max", "sum"):
        raise InputError("pool must be 'max' or 'sum'", pool=pool)
    latent = trace.activation(layer_index).astype(np.float64)
    if latent.ndim == 1:
        values = latent.copy()
    elif pool == "max":
        values = latent.reshape(latent.shape[0], -1).max(axis=1)
    else:
        values = latent.reshape(latent.shape[0], -1).sum(axis=1)
    method = "activation-max" if pool == "max" else "activation-sum"
    return ConceptVector(values, layer_index, "activation", method)


def normalize(v: ConceptVector) -> ConceptVector:
    """Scale to unit absolute sum; raises on an all-zero vector."""
    total = np.abs(v.values).sum()
    if total <= 0:
        raise DegenerateVectorError(
            "cannot normalize an all-zero concept vector",
            layer_index=v.layer_index,
            method=v.method,
        )
    return replace(v, values=v.values / total, normalized=True)


def project_basis(v: ConceptVector, basis: ConceptBasis) -> ConceptVector:
    """Decompose an activation vector onto the basis columns (identity = no-op)."""
    if basis.mode == "identity":
        return v
    u = basis.matrix.astype(np.float64)
    if u.shape[0] != v.values.shape[0]:
        raise InputError(
            "basis row count must match concept dimension",
            basis_rows=u.shape[0],
            vector_dim=v.values.shape[0],
        )
    rank = np.linalg.matrix_rank(u)
    if rank < u.shape[1]:
        deficient = _deficient_columns(u)
        raise NumericalError(
            "rank-deficient basis matrix", deficient_columns=deficient, rank=int(rank)
        )
    coeffs, *_ = np.linalg.lstsq(u, v.values, rcond=None)
    return replace(v, values=coeffs, normalized=False)


def _deficient_columns(u: np.ndarray) -> list[int]:
    """Columns that do not increase the rank of the preceding column block."""
    bad = []
    rank = 0
    for j in range(u.shape[1]):
        new_rank = np.linalg.matrix_rank(u[:, : j + 1])
        if new_rank == rank:
            bad.append(j)
        rank = new_rank
    return bad


def concept_heatmap(
    net: NetworkSpec,
    x: np.ndarray,
    class_index: int,
    layer_index: int,
    concept_index: int | None,
    composite: bool = False,
    epsilon: float = DEFAULT_EPSILON,
) -> Heatmap:
    """Input heatmap with the backward pass restricted to one concept.

    `concept_index=None` runs the unrestricted pass (the full explanation).
    """
    _check_concept_layer(net, layer_index)
    if concept_index is not None:
        n = concept_count(net, layer_index)
        if not 0 <= concept_index < n:
            raise InputError(
                "concept index out of range", concept_index=concept_index, concepts=n
            )
    trace = forward(net, x)
    rel = _lrp_backward(
        net,
        trace,
        class_index,
        stop_layer=-1,
        composite=composite,
        epsilon=epsilon,
        concept_mask=concept_index,
        mask_layer=layer_index if concept_index is not None else None,
    )
    return Heatmap(values=rel, concept_index=concept_index)


def relmax_select(relevance_matrix: np.ndarray, concept_index: int, k: int) -> list[int]:
    """Indices of the k samples most relevant for a concept, descending.

    Ties break toward the lower sample index.
    """
    matrix = np.asarray(relevance_matrix)
    if matrix.size == 0:
        raise InputError("empty relevance matrix")
    if matrix.ndim != 2:
        raise InputError("relevance matrix must be samples x concepts", ndim=matrix.ndim)
    if not 0 <= concept_index < matrix.shape[1]:
        raise InputError(
            "concept index out of range",
            concept_index=concept_index,
            concepts=matrix.shape[1],
        )
    if k > matrix.shape[0]:
        raise InputError("k exceeds sample count", k=k, samples=matrix.shape[0])
    column = matrix[:, concept_index]
    order = np.lexsort((np.arange(len(column)), -column))
    return [int(i) for i in order[:k]]
