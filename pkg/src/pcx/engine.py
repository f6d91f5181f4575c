"""Minimal deterministic feedforward inference engine.

Supports dense / conv2d / relu / maxpool2d / avgpool2d / flatten layers on
single samples (no batch axis), float32 throughout. Besides plain forward
passes it can resume the network from any intermediate activation
(``forward_from``) and compute exact logit gradients with respect to any
intermediate activation (``grad_wrt_layer``). All operations are pure
functions of (net, input): identical inputs give bitwise-identical outputs.

Layer index convention: index ``l`` refers to the activation *after* layer
``l``; index ``-1`` is the network input itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .tensorio import read_json, read_tensor, write_json, write_tensor

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "avgpool2d", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InputError(f"unknown layer kind '{self.kind}'", valid=list(LAYER_KINDS))
        if self.stride < 1:
            raise InputError("stride must be >= 1", kind=self.kind, stride=self.stride)
        if self.padding < 0:
            raise InputError("padding must be >= 0", kind=self.kind, padding=self.padding)
        if self.kind == "dense":
            if self.weights is None or self.weights.ndim != 2:
                raise InputError("dense layer needs a 2-d weight matrix")
            if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
                raise InputError(
                    "dense bias shape mismatch",
                    bias_shape=list(self.bias.shape),
                    out_features=self.weights.shape[0],
                )
        if self.kind == "conv2d":
            if self.weights is None or self.weights.ndim != 4:
                raise InputError("conv2d layer needs a 4-d weight tensor (out,in,kh,kw)")
            kh, kw = self.weights.shape[2], self.weights.shape[3]
            if kh != kw or (self.kernel and self.kernel != kh):
                raise InputError(
                    "conv2d kernel mismatch", kernel=self.kernel, weight_kernel=[kh, kw]
                )
            object.__setattr__(self, "kernel", kh)
            if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
                raise InputError(
                    "conv2d bias shape mismatch",
                    bias_shape=list(self.bias.shape),
                    out_channels=self.weights.shape[0],
                )
        if self.kind in ("maxpool2d", "avgpool2d") and self.kernel < 1:
            raise InputError("pool layer needs kernel >= 1", kind=self.kind)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    class_count: int
    shapes: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(_out_shape(layer, shapes[-1], i))
        if self.class_count < 1:
            raise InputError("class_count must be positive", class_count=self.class_count)
        if shapes[-1] != (self.class_count,):
            raise InputError(
                "final layer output must be the logit vector",
                final_shape=list(shapes[-1]),
                class_count=self.class_count,
            )
        object.__setattr__(self, "shapes", tuple(shapes))

    def activation_shape(self, layer_index: int) -> tuple[int, ...]:
        """Shape of the activation after `layer_index` (-1 = network input)."""
        self.check_layer_index(layer_index)
        return self.shapes[layer_index + 1]

    def check_layer_index(self, layer_index: int) -> None:
        if not -1 <= layer_index < len(self.layers):
            raise InputError(
                "layer index out of range",
                layer_index=layer_index,
                layer_count=len(self.layers),
            )


@dataclass(frozen=True)
class ActivationTrace:
    """Input plus every layer's output for one sample."""

    input: np.ndarray
    outputs: tuple[np.ndarray, ...]

    def activation(self, layer_index: int) -> np.ndarray:
        """Activation after `layer_index` (-1 = the input)."""
        return self.input if layer_index == -1 else self.outputs[layer_index]

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]


def _out_shape(layer: LayerSpec, in_shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    kind = layer.kind
    if kind == "dense":
        n_out, n_in = layer.weights.shape
        if in_shape != (n_in,):
            raise InputError(
                "dense input shape mismatch",
                layer_index=index,
                expected=[n_in],
                got=list(in_shape),
            )
        return (n_out,)
    if kind == "relu":
        return in_shape
    if kind == "flatten":
        n = 1
        for d in in_shape:
            n *= d
        return (n,)
    if len(in_shape) != 3:
        raise InputError(
            "conv/pool layers need (channels, height, width) input",
            layer_index=index,
            got=list(in_shape),
        )
    c, h, w = in_shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    if kind == "conv2d":
        c_out, c_in = layer.weights.shape[0], layer.weights.shape[1]
        if c_in != c:
            raise InputError(
                "conv2d channel mismatch", layer_index=index, expected=c_in, got=c
            )
    else:
        c_out = c
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if h + 2 * p < k or w + 2 * p < k or ho < 1 or wo < 1:
        raise InputError(
            "kernel does not fit spatial extent",
            layer_index=index,
            input_hw=[h, w],
            kernel=k,
            stride=s,
            padding=p,
        )
    return (c_out, ho, wo)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(C,H,W) -> (C*k*k, HO*WO) patch matrix, rows in (c, ki, kj) row-major order."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = np.empty((c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(
    cols: np.ndarray, in_shape: tuple[int, int, int], k: int, stride: int, pad: int
) -> np.ndarray:
    """Scatter-add the inverse of `_im2col` and crop the padding back off."""
    c, h, w = in_shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cc = cols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cc[:, i, j]
    if pad:
        out = out[:, pad : pad + h, pad : pad + w]
    return out


def _pool_windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(C,H,W) -> (C, HO, WO, k*k) view-like window tensor (no padding)."""
    c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = np.empty((c, ho, wo, k * k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            win[:, :, :, i * k + j] = x[
                :, i : i + stride * ho : stride, j : j + stride * wo : stride
            ]
    return win


def apply_layer(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "dense":
        z = layer.weights @ x
        if layer.bias is not None:
            z = z + layer.bias
        return z
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "flatten":
        return x.reshape(-1)
    if kind == "conv2d":
        cols = _im2col(x, layer.kernel, layer.stride, layer.padding)
        w_mat = layer.weights.reshape(layer.weights.shape[0], -1)
        out = w_mat @ cols
        if layer.bias is not None:
            out = out + layer.bias[:, None]
        c, h, w = x.shape
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        return out.reshape(layer.weights.shape[0], ho, wo)
    if kind == "maxpool2d":
        xp = _pad_for_pool(x, layer.padding, -np.inf)
        return _pool_windows(xp, layer.kernel, layer.stride).max(axis=3)
    if kind == "avgpool2d":
        xp = _pad_for_pool(x, layer.padding, 0.0)
        win = _pool_windows(xp, layer.kernel, layer.stride)
        return win.sum(axis=3) / np.asarray(layer.kernel * layer.kernel, dtype=x.dtype)
    raise InputError(f"unknown layer kind '{kind}'")


def _pad_for_pool(x: np.ndarray, pad: int, value: float) -> np.ndarray:
    if not pad:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)), constant_values=value)


def backward_layer(layer: LayerSpec, x_in: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Exact vector-Jacobian product of one layer at input `x_in`."""
    kind = layer.kind
    if kind == "dense":
        return layer.weights.T @ grad_out
    if kind == "relu":
        return grad_out * (x_in > 0)
    if kind == "flatten":
        return grad_out.reshape(x_in.shape)
    if kind == "conv2d":
        w_mat = layer.weights.reshape(layer.weights.shape[0], -1)
        g_cols = w_mat.T @ grad_out.reshape(grad_out.shape[0], -1)
        return _col2im(g_cols, x_in.shape, layer.kernel, layer.stride, layer.padding)
    if kind == "maxpool2d":
        return _pool_route_to_max(layer, x_in, grad_out)
    if kind == "avgpool2d":
        k = layer.kernel
        per_out = (grad_out / np.asarray(k * k, dtype=grad_out.dtype)).reshape(
            grad_out.shape[0], -1
        )
        g_cols = np.ascontiguousarray(
            np.broadcast_to(
                per_out[:, None, :], (x_in.shape[0], k * k, per_out.shape[1])
            ).reshape(x_in.shape[0] * k * k, -1)
        )
        padded_shape = (
            x_in.shape[0],
            x_in.shape[1] + 2 * layer.padding,
            x_in.shape[2] + 2 * layer.padding,
        )
        out = _col2im(g_cols, padded_shape, k, layer.stride, 0)
        if layer.padding:
            out = out[
                :,
                layer.padding : layer.padding + x_in.shape[1],
                layer.padding : layer.padding + x_in.shape[2],
            ]
        return out
    raise InputError(f"unknown layer kind '{kind}'")


def _pool_route_to_max(layer: LayerSpec, x_in: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route each window's gradient to its first maximal element (row-major ties)."""
    k, stride, pad = layer.kernel, layer.stride, layer.padding
    xp = _pad_for_pool(x_in, pad, -np.inf)
    win = _pool_windows(xp, k, stride)
    winners = win.argmax(axis=3)  # first max in (ki, kj) row-major order
    grad_in = np.zeros_like(xp, dtype=grad_out.dtype)
    c, ho, wo = grad_out.shape
    ci, oi, oj = np.meshgrid(np.arange(c), np.arange(ho), np.arange(wo), indexing="ij")
    ki, kj = winners // k, winners % k
    np.add.at(grad_in, (ci, oi * stride + ki, oj * stride + kj), grad_out)
    if pad:
        grad_in = grad_in[:, pad : pad + x_in.shape[1], pad : pad + x_in.shape[2]]
    return grad_in


def forward(net: NetworkSpec, x: np.ndarray) -> ActivationTrace:
    """Run the full network, returning every layer's output."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape != net.input_shape:
        raise InputError(
            "input shape mismatch",
            layer_index=0,
            expected=list(net.input_shape),
            got=list(x.shape),
        )
    outputs = []
    cur = x
    for layer in net.layers:
        cur = apply_layer(layer, cur)
        outputs.append(cur)
    return ActivationTrace(input=x, outputs=tuple(outputs))


def forward_from(net: NetworkSpec, layer_index: int, patched: np.ndarray) -> np.ndarray:
    """Apply layers `layer_index+1 .. L` to a patched activation, returning logits."""
    net.check_layer_index(layer_index)
    patched = np.asarray(patched, dtype=np.float32)
    expected = net.activation_shape(layer_index)
    if patched.shape != expected:
        raise InputError(
            "patched activation shape mismatch",
            layer_index=layer_index,
            expected=list(expected),
            got=list(patched.shape),
        )
    cur = patched
    for layer in net.layers[layer_index + 1 :]:
        cur = apply_layer(layer, cur)
    return cur


def grad_wrt_layer(
    net: NetworkSpec, x: np.ndarray, layer_index: int, class_index: int
) -> np.ndarray:
    """Exact gradient of logit `class_index` w.r.t. the activation after `layer_index`."""
    net.check_layer_index(layer_index)
    if not 0 <= class_index < net.class_count:
        raise InputError(
            "class index out of range", class_index=class_index, class_count=net.class_count
        )
    trace = forward(net, x)
    return grad_from_trace(net, trace, layer_index, class_index)


def grad_from_trace(
    net: NetworkSpec,
    trace: ActivationTrace,
    layer_index: int,
    class_index: int,
    guided: bool = False,
) -> np.ndarray:
    """Backpropagate a one-hot logit seed down to `layer_index`.

    With ``guided=True``, negative gradient entries are clamped to zero at
    every ReLU before its own mask is applied.
    """
    net.check_layer_index(layer_index)
    grad = np.zeros(net.class_count, dtype=np.float32)
    grad[class_index] = 1.0
    for l in range(len(net.layers) - 1, layer_index, -1):
        layer = net.layers[l]
        if guided and layer.kind == "relu":
            grad = np.maximum(grad, 0)
        grad = backward_layer(layer, trace.activation(l - 1), grad)
    return grad


# --- network spec (de)serialization -----------------------------------------


def load_network(path: str | Path) -> NetworkSpec:
    """Load a network from its JSON spec; weight paths are relative to the file."""
    path = Path(path)
    doc = read_json(path)
    for key in ("layers", "input_shape", "class_count"):
        if key not in doc:
            raise InputError(f"network spec missing '{key}'", path=str(path))
    layers = []
    for i, entry in enumerate(doc["layers"]):
        kind = entry.get("kind")
        weights = bias = None
        if entry.get("weights"):
            weights = read_tensor(path.parent / entry["weights"])
        if entry.get("bias"):
            bias = read_tensor(path.parent / entry["bias"])
        try:
            layers.append(
                LayerSpec(
                    kind=kind,
                    weights=weights,
                    bias=bias,
                    kernel=int(entry.get("kernel", 0)),
                    stride=int(entry.get("stride", 1)),
                    padding=int(entry.get("padding", 0)),
                )
            )
        except InputError as exc:
            raise InputError(
                f"layer {i}: {exc.message}", path=str(path), layer_index=i, **exc.detail
            ) from exc
    return NetworkSpec(
        layers=tuple(layers),
        input_shape=tuple(doc["input_shape"]),
        class_count=int(doc["class_count"]),
    )


def save_network(net: NetworkSpec, path: str | Path) -> None:
    """Write the JSON spec plus one PCXT file per weight/bias next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, layer in enumerate(net.layers):
        entry: dict = {"kind": layer.kind}
        if layer.weights is not None:
            name = f"layer{i:02d}_w.pcxt"
            write_tensor(path.parent / name, layer.weights)
            entry["weights"] = name
        if layer.bias is not None:
            name = f"layer{i:02d}_b.pcxt"
            write_tensor(path.parent / name, layer.bias)
            entry["bias"] = name
        if layer.kind in ("conv2d", "maxpool2d", "avgpool2d"):
            entry["kernel"] = layer.kernel
            entry["stride"] = layer.stride
            entry["padding"] = layer.padding
        entries.append(entry)
    write_json(
        path,
        {
            "layers": entries,
            "input_shape": list(net.input_shape),
            "class_count": net.class_count,
        },
    )
