"""Shared test helpers: random net generation and a float64 shadow forward.

The shadow forward is an independent re-implementation (sliding-window
einsum for conv, explicit pooling) used as the oracle for gradient and
logit checks. It runs in float64 on batched inputs and records every ReLU
mask and maxpool argmax so finite-difference probes can skip coordinates
whose perturbation interval crosses a decision boundary (where the network
is non-differentiable and central differences are meaningless).
"""

import numpy as np
import pytest

from pcx import engine


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_net(rng, bias=False, min_margin=1e-3, max_units=64):
    """Small random net mixing dense / conv / pool / flatten layers.

    Regenerates until no forward pre-activation sits within `min_margin`
    of zero and every maxpool window has a top-two gap above `min_margin`,
    so attribution and gradient checks stay away from kinks.
    """
    for _ in range(500):
        arch = int(rng.integers(0, 3))
        layers = []
        if arch == 0:
            depth = int(rng.integers(2, 5))
            dims = [int(rng.integers(2, 9)) for _ in range(depth)]
            in_shape = (dims[0],)
            for a, b in zip(dims[:-1], dims[1:]):
                w = rng.standard_normal((b, a)).astype(np.float32)
                bv = rng.standard_normal(b).astype(np.float32) if bias else None
                layers.append(engine.LayerSpec(kind="dense", weights=w, bias=bv))
                layers.append(engine.LayerSpec(kind="relu"))
            layers = layers[:-1]
            classes = dims[-1]
        elif arch == 1:
            c_in = int(rng.integers(1, 4))
            c_out = int(rng.integers(1, 5))
            hw = int(rng.integers(5, 8))
            k = int(rng.integers(2, 4))
            in_shape = (c_in, hw, hw)
            w = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32)
            bv = rng.standard_normal(c_out).astype(np.float32) if bias else None
            layers.append(
                engine.LayerSpec(
                    kind="conv2d", weights=w, bias=bv, kernel=k, stride=1,
                    padding=int(rng.integers(0, 2)),
                )
            )
            layers.append(engine.LayerSpec(kind="relu"))
            pool = "maxpool2d" if rng.integers(0, 2) else "avgpool2d"
            layers.append(engine.LayerSpec(kind=pool, kernel=2, stride=2))
            layers.append(engine.LayerSpec(kind="flatten"))
            flat = _probe_dim(layers, in_shape)
            classes = int(rng.integers(2, 5))
            w2 = rng.standard_normal((classes, flat)).astype(np.float32)
            b2 = rng.standard_normal(classes).astype(np.float32) if bias else None
            layers.append(engine.LayerSpec(kind="dense", weights=w2, bias=b2))
        else:
            c_in = int(rng.integers(1, 3))
            c_mid = int(rng.integers(1, 4))
            c_out = int(rng.integers(1, 4))
            hw = int(rng.integers(5, 8))
            in_shape = (c_in, hw, hw)
            w1 = rng.standard_normal((c_mid, c_in, 3, 3)).astype(np.float32)
            w2 = rng.standard_normal((c_out, c_mid, 2, 2)).astype(np.float32)
            layers.append(
                engine.LayerSpec(kind="conv2d", weights=w1, kernel=3, stride=1, padding=1)
            )
            layers.append(engine.LayerSpec(kind="relu"))
            layers.append(
                engine.LayerSpec(kind="conv2d", weights=w2, kernel=2, stride=1, padding=0)
            )
            layers.append(engine.LayerSpec(kind="flatten"))
            flat = _probe_dim(layers, in_shape)
            classes = int(rng.integers(2, 5))
            w3 = rng.standard_normal((classes, flat)).astype(np.float32)
            layers.append(engine.LayerSpec(kind="dense", weights=w3))
        net = engine.NetworkSpec(
            layers=tuple(layers), input_shape=in_shape, class_count=classes
        )
        x = rng.standard_normal(in_shape).astype(np.float32)
        if _clean_margins(net, x, min_margin):
            return net, x
    raise RuntimeError("could not generate a margin-clean random net")


def _probe_dim(layers, in_shape):
    shape = in_shape
    for layer in layers:
        shape = engine._out_shape(layer, shape, 0)
    return shape[0]


def _clean_margins(net, x, margin):
    trace = engine.forward(net, x)
    for i, layer in enumerate(net.layers):
        if layer.kind == "relu":
            if np.abs(trace.activation(i - 1)).min() < margin:
                return False
        if layer.kind in ("dense", "conv2d"):
            if np.abs(trace.activation(i)).min() < margin:
                return False
        if layer.kind == "maxpool2d":
            win = engine._pool_windows(
                engine._pad_for_pool(
                    trace.activation(i - 1), layer.padding, -np.inf
                ),
                layer.kernel,
                layer.stride,
            )
            top2 = np.sort(win, axis=3)[..., -2:]
            if (top2[..., 1] - top2[..., 0]).min() < margin:
                return False
    return True


def shadow_forward_batch(net, batch, start_layer=-1):
    """Float64 batched forward from `start_layer`, with decision records.

    Returns (logits (B, classes), decisions) where decisions is a list of
    arrays: boolean ReLU masks and integer maxpool argmaxes, one per
    decision layer, each with a leading batch axis.
    """
    cur = np.asarray(batch, dtype=np.float64)
    decisions = []
    for layer in net.layers[start_layer + 1 :]:
        kind = layer.kind
        if kind == "dense":
            cur = np.einsum("oi,bi->bo", layer.weights.astype(np.float64), cur)
            if layer.bias is not None:
                cur = cur + layer.bias.astype(np.float64)
        elif kind == "relu":
            decisions.append(cur > 0)
            cur = np.maximum(cur, 0)
        elif kind == "flatten":
            cur = cur.reshape(cur.shape[0], -1)
        elif kind == "conv2d":
            cur = _shadow_conv(layer, cur)
        elif kind in ("maxpool2d", "avgpool2d"):
            cur, dec = _shadow_pool(layer, cur)
            if dec is not None:
                decisions.append(dec)
        else:
            raise AssertionError(kind)
    return cur, decisions


def _shadow_conv(layer, cur):
    k, s, p = layer.kernel, layer.stride, layer.padding
    w = layer.weights.astype(np.float64)
    if p:
        cur = np.pad(cur, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(cur, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s, :, :]
    out = np.einsum("bcijkl,ockl->boij", win, w)
    if layer.bias is not None:
        out = out + layer.bias.astype(np.float64)[None, :, None, None]
    return out


def _shadow_pool(layer, cur):
    k, s, p = layer.kernel, layer.stride, layer.padding
    fill = -np.inf if layer.kind == "maxpool2d" else 0.0
    if p:
        cur = np.pad(cur, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill)
    win = np.lib.stride_tricks.sliding_window_view(cur, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s, :, :]
    flat = win.reshape(*win.shape[:4], k * k)
    if layer.kind == "maxpool2d":
        return flat.max(axis=4), flat.argmax(axis=4)
    return flat.sum(axis=4) / (k * k), None


def finite_difference_gradient(net, x, layer_index, class_index, step=1e-3):
    """Central differences on the float64 shadow forward.

    Returns (gradient, valid_mask): coordinates whose +/-step probes flip a
    downstream ReLU mask or maxpool winner are marked invalid.
    """
    trace = engine.forward(net, x)
    a = trace.activation(layer_index).astype(np.float64)
    flat = a.reshape(-1)
    n = flat.size
    batch = np.repeat(flat[None, :], 2 * n + 1, axis=0)
    for i in range(n):
        batch[2 * i, i] += step
        batch[2 * i + 1, i] -= step
    batch = batch.reshape(2 * n + 1, *a.shape)
    logits, decisions = shadow_forward_batch(net, batch, start_layer=layer_index)
    y = logits[:, class_index]
    grad = (y[0 : 2 * n : 2] - y[1 : 2 * n + 1 : 2]) / (2 * step)
    valid = np.ones(n, dtype=bool)
    for dec in decisions:
        ref = dec[-1]
        flat_dec = dec.reshape(dec.shape[0], -1)
        ref_flat = ref.reshape(-1)
        mism = (flat_dec != ref_flat[None, :]).any(axis=1)
        valid &= ~(mism[0 : 2 * n : 2] | mism[1 : 2 * n + 1 : 2])
    return grad.reshape(a.shape), valid.reshape(a.shape)
