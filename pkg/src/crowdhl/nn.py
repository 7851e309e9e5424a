"""3D convolutional network with hand-written forward and backward passes.

Layers work on single samples. A cuboid enters as (C, H, W, T); convolutions
are valid (no padding), stride 1; pooling is non-overlapping with floor
semantics; the head is a 2-way softmax over the last dense layer's logits.

The architecture is described by a JSON-serializable config::

    {"format_version": 1,
     "input": [C, H, W, T],
     "layers": [{"type": "conv3d", "filters": 12, "kernel": [3, 3, 3], "activation": "relu"},
                {"type": "maxpool3d", "pool": [2, 2, 2]},
                {"type": "flatten"},
                {"type": "dropout", "rate": 0.5},
                {"type": "dense", "units": 32, "activation": "relu"},
                ...
                {"type": "dense", "units": 2, "activation": "linear"}]}

The softmax is implicit after the final dense layer, which must be linear
with exactly two units (index 0 = standard play, index 1 = highlight).
"""

from __future__ import annotations

import copy
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, NumericError, ShapeError, UsageError
from .rng import SplitMix64

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"HNM1"
ACTIVATIONS = ("relu", "linear")

# Above this many im2col elements the convolution falls back to looping over
# kernel offsets, trading a little speed for bounded memory.
IM2COL_MAX_ELEMENTS = 8_000_000


def default_architecture(channels: int = 3) -> dict:
    """Four conv layers (12, 12, pool, 8, 8) and dense 32 -> 8 -> 2 on 100x100x30 cuboids."""
    return {
        "format_version": FORMAT_VERSION,
        "input": [channels, 100, 100, 30],
        "layers": [
            {"type": "conv3d", "filters": 12, "kernel": [3, 3, 3], "activation": "relu"},
            {"type": "conv3d", "filters": 12, "kernel": [3, 3, 3], "activation": "relu"},
            {"type": "maxpool3d", "pool": [2, 2, 2]},
            {"type": "conv3d", "filters": 8, "kernel": [3, 3, 3], "activation": "relu"},
            {"type": "conv3d", "filters": 8, "kernel": [3, 3, 3], "activation": "relu"},
            {"type": "flatten"},
            {"type": "dropout", "rate": 0.5},
            {"type": "dense", "units": 32, "activation": "relu"},
            {"type": "dropout", "rate": 0.5},
            {"type": "dense", "units": 8, "activation": "relu"},
            {"type": "dense", "units": 2, "activation": "linear"},
        ],
    }


def synthetic_architecture() -> dict:
    """Shrunk network for (1, 32, 32, 10) cuboids.

    Pooling is spatial only (2, 2, 1): a 2x2x2 pool would leave a single
    frame after the third convolution and the fourth could not run.
    """
    return {
        "format_version": FORMAT_VERSION,
        "input": [1, 32, 32, 10],
        "layers": [
            {"type": "conv3d", "filters": 4, "kernel": [3, 3, 3], "activation": "relu"},
            {"type": "conv3d", "filters": 4, "kernel": [3, 3, 3], "activation": "relu"},
            {"type": "maxpool3d", "pool": [2, 2, 1]},
            {"type": "conv3d", "filters": 4, "kernel": [3, 3, 3], "activation": "relu"},
            {"type": "conv3d", "filters": 4, "kernel": [3, 3, 3], "activation": "relu"},
            {"type": "flatten"},
            {"type": "dropout", "rate": 0.5},
            {"type": "dense", "units": 16, "activation": "relu"},
            {"type": "dropout", "rate": 0.5},
            {"type": "dense", "units": 8, "activation": "relu"},
            {"type": "dense", "units": 2, "activation": "linear"},
        ],
    }


def tiny_architecture() -> dict:
    """Small model used by gradient checks: (1, 16, 16, 8), 2+2 filters, pool, dense 8 -> 4 -> 2."""
    return {
        "format_version": FORMAT_VERSION,
        "input": [1, 16, 16, 8],
        "layers": [
            {"type": "conv3d", "filters": 2, "kernel": [3, 3, 3], "activation": "relu"},
            {"type": "conv3d", "filters": 2, "kernel": [3, 3, 3], "activation": "relu"},
            {"type": "maxpool3d", "pool": [2, 2, 2]},
            {"type": "flatten"},
            {"type": "dropout", "rate": 0.5},
            {"type": "dense", "units": 8, "activation": "relu"},
            {"type": "dropout", "rate": 0.5},
            {"type": "dense", "units": 4, "activation": "relu"},
            {"type": "dense", "units": 2, "activation": "linear"},
        ],
    }


# --------------------------------------------------------------------------- layers


@dataclass
class Conv3dLayer:
    weights: np.ndarray  # (out_ch, in_ch, kh, kw, kt)
    bias: np.ndarray  # (out_ch,)
    activation: str = "relu"

    def __post_init__(self):
        if self.weights.ndim != 5 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bad conv3d parameter shapes {self.weights.shape}, {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")

    def output_shape(self, in_shape):
        out_ch, in_ch, kh, kw, kt = self.weights.shape
        if len(in_shape) != 4 or in_shape[0] != in_ch:
            raise ShapeError(f"conv3d expects ({in_ch}, H, W, T) input, got {tuple(in_shape)}")
        _, h, w, t = in_shape
        if h < kh or w < kw or t < kt:
            raise ShapeError(f"input {tuple(in_shape)} smaller than kernel {(kh, kw, kt)}")
        return (out_ch, h - kh + 1, w - kw + 1, t - kt + 1)

    def params(self):
        return [self.weights, self.bias]


@dataclass
class MaxPool3dLayer:
    pool: tuple = (2, 2, 2)

    def __post_init__(self):
        self.pool = tuple(int(p) for p in self.pool)
        if len(self.pool) != 3 or min(self.pool) < 1:
            raise UsageError(f"bad pool extents {self.pool}")

    @property
    def stride(self):
        return self.pool

    def output_shape(self, in_shape):
        if len(in_shape) != 4:
            raise ShapeError(f"maxpool3d expects (C, H, W, T) input, got {tuple(in_shape)}")
        c = in_shape[0]
        dims = in_shape[1:]
        if any(d < p for d, p in zip(dims, self.pool)):
            raise ShapeError(f"input {tuple(in_shape)} smaller than pool {self.pool}")
        return (c,) + tuple(d // p for d, p in zip(dims, self.pool))

    def params(self):
        return []


@dataclass
class FlattenLayer:
    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def params(self):
        return []


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bad dense parameter shapes {self.weights.shape}, {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.weights.shape[1],):
            raise ShapeError(f"dense expects ({self.weights.shape[1]},) input, got {tuple(in_shape)}")
        return (self.weights.shape[0],)

    def params(self):
        return [self.weights, self.bias]


@dataclass
class DropoutLayer:
    rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise UsageError(f"dropout rate must be in [0, 1), got {self.rate}")

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def params(self):
        return []


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0, out=z)
    return z


def _activation_grad(upstream: np.ndarray, out: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return upstream * (out > 0)
    return upstream


# --------------------------------------------------------------------------- conv3d


def _im2col(x: np.ndarray, kernel) -> np.ndarray:
    """(C, H, W, T) -> (C*kh*kw*kt, Ho*Wo*To) patch matrix."""
    c = x.shape[0]
    win = sliding_window_view(x, kernel, axis=(1, 2, 3))  # (C, Ho, Wo, To, kh, kw, kt)
    win = win.transpose(0, 4, 5, 6, 1, 2, 3)
    return win.reshape(c * math.prod(kernel), -1)


def _conv_forward(x, w, b, activation):
    out_ch, in_ch, kh, kw, kt = w.shape
    out_shape = (out_ch, x.shape[1] - kh + 1, x.shape[2] - kw + 1, x.shape[3] - kt + 1)
    n = math.prod(out_shape[1:])
    cols = None
    if in_ch * kh * kw * kt * n <= IM2COL_MAX_ELEMENTS:
        cols = _im2col(x, (kh, kw, kt))
        z = w.reshape(out_ch, -1) @ cols
    else:
        _, ho, wo, to = out_shape
        z = np.zeros((out_ch, n), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                for k in range(kt):
                    xs = x[:, i : i + ho, j : j + wo, k : k + to].reshape(in_ch, n)
                    z += w[:, :, i, j, k] @ xs
    z += b[:, None]
    out = _activate(z, activation).reshape(out_shape)
    return out, cols


def conv3d_apply(layer: Conv3dLayer, x: np.ndarray) -> np.ndarray:
    """Valid stride-1 cross-correlation plus bias, then the layer activation."""
    layer.output_shape(x.shape)
    out, _ = _conv_forward(x, layer.weights, layer.bias, layer.activation)
    return out


@dataclass
class ConvCache:
    x: np.ndarray
    out: np.ndarray
    cols: np.ndarray | None = None


def conv3d_forward(layer: Conv3dLayer, x: np.ndarray) -> tuple[np.ndarray, ConvCache]:
    layer.output_shape(x.shape)
    out, cols = _conv_forward(x, layer.weights, layer.bias, layer.activation)
    return out, ConvCache(x, out, cols)


def conv3d_backward(layer: Conv3dLayer, cache: ConvCache, upstream: np.ndarray, need_input_grad: bool = True):
    """Return ``(input_grad, weight_grad, bias_grad)``; ``input_grad`` is None when not requested."""
    if upstream.shape != cache.out.shape:
        raise ShapeError(f"upstream gradient {upstream.shape} != conv output {cache.out.shape}")
    w = layer.weights
    out_ch, in_ch, kh, kw, kt = w.shape
    x = cache.x
    _, ho, wo, to = cache.out.shape
    n = ho * wo * to
    g = _activation_grad(upstream, cache.out, layer.activation).reshape(out_ch, n)
    bias_grad = g.sum(axis=1)

    cols = cache.cols
    if cols is None and in_ch * kh * kw * kt * n <= IM2COL_MAX_ELEMENTS:
        cols = _im2col(x, (kh, kw, kt))

    if cols is not None:
        weight_grad = (g @ cols.T).reshape(w.shape)
    else:
        weight_grad = np.empty_like(w)
        for i in range(kh):
            for j in range(kw):
                for k in range(kt):
                    xs = x[:, i : i + ho, j : j + wo, k : k + to].reshape(in_ch, n)
                    weight_grad[:, :, i, j, k] = g @ xs.T

    input_grad = None
    if need_input_grad:
        input_grad = np.zeros_like(x)
        if cols is not None:
            dcols = (w.reshape(out_ch, -1).T @ g).reshape(in_ch, kh, kw, kt, ho, wo, to)
            for i in range(kh):
                for j in range(kw):
                    for k in range(kt):
                        input_grad[:, i : i + ho, j : j + wo, k : k + to] += dcols[:, i, j, k]
        else:
            for i in range(kh):
                for j in range(kw):
                    for k in range(kt):
                        contrib = (w[:, :, i, j, k].T @ g).reshape(in_ch, ho, wo, to)
                        input_grad[:, i : i + ho, j : j + wo, k : k + to] += contrib
    return input_grad, weight_grad, bias_grad


# --------------------------------------------------------------------------- pooling


@dataclass
class PoolCache:
    argmax: np.ndarray  # (C, Ho, Wo, To) flat index into each pool block
    in_shape: tuple


def maxpool3d_apply(layer: MaxPool3dLayer, x: np.ndarray) -> tuple[np.ndarray, PoolCache]:
    """Per-block maximum; trailing remainders on each pooled axis are dropped."""
    c, ho, wo, to = layer.output_shape(x.shape)
    ph, pw, pt = layer.pool
    blocks = x[:, : ho * ph, : wo * pw, : to * pt].reshape(c, ho, ph, wo, pw, to, pt)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, ho, wo, to, ph * pw * pt)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), PoolCache(arg, x.shape)


def maxpool3d_backward(layer: MaxPool3dLayer, cache: PoolCache, upstream: np.ndarray) -> np.ndarray:
    if upstream.shape != cache.argmax.shape:
        raise ShapeError(f"upstream gradient {upstream.shape} != pool output {cache.argmax.shape}")
    c, ho, wo, to = upstream.shape
    ph, pw, pt = layer.pool
    blocks = np.zeros((c, ho, wo, to, ph * pw * pt), dtype=upstream.dtype)
    np.put_along_axis(blocks, cache.argmax[..., None], upstream[..., None], axis=-1)
    blocks = blocks.reshape(c, ho, wo, to, ph, pw, pt).transpose(0, 1, 4, 2, 5, 3, 6)
    dx = np.zeros(cache.in_shape, dtype=upstream.dtype)
    dx[:, : ho * ph, : wo * pw, : to * pt] = blocks.reshape(c, ho * ph, wo * pw, to * pt)
    return dx


# --------------------------------------------------------------------------- dense / dropout / softmax


@dataclass
class DenseCache:
    x: np.ndarray
    out: np.ndarray


def dense_apply(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    layer.output_shape(x.shape)
    return _activate(layer.weights @ x + layer.bias, layer.activation)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> tuple[np.ndarray, DenseCache]:
    out = dense_apply(layer, x)
    return out, DenseCache(x, out)


def dense_backward(layer: DenseLayer, cache: DenseCache, upstream: np.ndarray):
    if upstream.shape != cache.out.shape:
        raise ShapeError(f"upstream gradient {upstream.shape} != dense output {cache.out.shape}")
    g = _activation_grad(upstream, cache.out, layer.activation)
    return layer.weights.T @ g, np.outer(g, cache.x), g.copy()


def dropout_apply(layer: DropoutLayer, x: np.ndarray, mode: str = "infer", rng: SplitMix64 | None = None):
    """Inverted dropout. Returns ``(output, mask)``; the mask already carries the 1/(1-rate) scale.

    In infer mode, or with rate 0, the input passes through and the mask is None.
    """
    if mode == "infer" or layer.rate == 0.0:
        return x, None
    if mode != "train":
        raise UsageError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise UsageError("train-mode dropout needs an rng")
    keep = rng.uniform(x.size).reshape(x.shape) >= layer.rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - layer.rate))
    return x * mask, mask


def softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"non-finite logits {logits}")
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


# --------------------------------------------------------------------------- model


Layer = Conv3dLayer | MaxPool3dLayer | FlattenLayer | DenseLayer | DropoutLayer


@dataclass
class ModelParams:
    config: dict
    layers: list
    format_version: int = FORMAT_VERSION

    @property
    def input_shape(self) -> tuple:
        return tuple(self.config["input"])

    @property
    def dtype(self) -> np.dtype:
        for p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)

    def parameters(self) -> list[np.ndarray]:
        """Weight and bias arrays of every parameterized layer, in layer order."""
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> None:
        arrays = list(arrays)
        expected = self.parameters()
        if len(arrays) != len(expected):
            raise ShapeError(f"expected {len(expected)} parameter arrays, got {len(arrays)}")
        it = iter(arrays)
        for layer in self.layers:
            if isinstance(layer, (Conv3dLayer, DenseLayer)):
                w, b = next(it), next(it)
                if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                    raise ShapeError("parameter shape mismatch in set_parameters")
                layer.weights, layer.bias = w, b

    def shape_chain(self) -> list[tuple]:
        """Input extents followed by the output extents of every non-dropout layer."""
        shapes = [self.input_shape]
        for layer in self.layers:
            if isinstance(layer, DropoutLayer):
                continue
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        out.set_parameters([p.astype(dtype) for p in self.parameters()])
        return out

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def with_dropout(self, rate: float) -> "ModelParams":
        out = self.copy()
        for layer in out.layers:
            if isinstance(layer, DropoutLayer):
                layer.rate = float(rate)
        out.config = dict(out.config)
        out.config["layers"] = [
            dict(spec, rate=float(rate)) if spec["type"] == "dropout" else spec for spec in self.config["layers"]
        ]
        return out

    @classmethod
    def from_config(cls, config: dict, seed: int = 0, dtype=np.float32) -> "ModelParams":
        """Build a model with He-normal (ReLU layers) / Glorot-uniform (linear layers) weights and zero biases."""
        rng = SplitMix64(seed)
        layers = build_layers(config, dtype)
        for layer in layers:
            if isinstance(layer, (Conv3dLayer, DenseLayer)):
                w = layer.weights
                receptive = math.prod(w.shape[2:])
                fan_in = w.shape[1] * receptive
                fan_out = w.shape[0] * receptive
                if layer.activation == "relu":
                    values = rng.normal(w.size) * math.sqrt(2.0 / fan_in)
                else:
                    limit = math.sqrt(6.0 / (fan_in + fan_out))
                    values = rng.uniform_range(-limit, limit, w.size)
                layer.weights = values.reshape(w.shape).astype(dtype)
        return cls(config=normalize_config(config), layers=layers)


def normalize_config(config: dict) -> dict:
    """Canonical copy of an architecture config (plain ints/floats/lists)."""
    layers = []
    for spec in config["layers"]:
        kind = spec.get("type")
        if kind == "conv3d":
            layers.append(
                {
                    "type": "conv3d",
                    "filters": int(spec["filters"]),
                    "kernel": [int(k) for k in spec.get("kernel", [3, 3, 3])],
                    "activation": str(spec.get("activation", "relu")),
                }
            )
        elif kind == "maxpool3d":
            layers.append({"type": "maxpool3d", "pool": [int(p) for p in spec.get("pool", [2, 2, 2])]})
        elif kind == "flatten":
            layers.append({"type": "flatten"})
        elif kind == "dropout":
            layers.append({"type": "dropout", "rate": float(spec.get("rate", 0.5))})
        elif kind == "dense":
            layers.append(
                {"type": "dense", "units": int(spec["units"]), "activation": str(spec.get("activation", "relu"))}
            )
        else:
            raise FormatError(f"unknown layer type {kind!r}")
    return {
        "format_version": int(config.get("format_version", FORMAT_VERSION)),
        "input": [int(v) for v in config["input"]],
        "layers": layers,
    }


def build_layers(config: dict, dtype=np.float32) -> list:
    """Instantiate zero-valued layers from a config and validate the shape chain."""
    try:
        config = normalize_config(config)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed architecture config: {exc}") from exc
    shape = tuple(config["input"])
    if len(shape) != 4 or min(shape) < 1:
        raise FormatError(f"input extents must be (C, H, W, T), got {shape}")
    layers = []
    for spec in config["layers"]:
        kind = spec["type"]
        if kind == "conv3d":
            if len(shape) != 4:
                raise FormatError(f"conv3d layer needs a (C, H, W, T) input, got {shape}")
            kernel = tuple(spec["kernel"])
            layer = Conv3dLayer(
                np.zeros((spec["filters"], shape[0]) + kernel, dtype=dtype),
                np.zeros(spec["filters"], dtype=dtype),
                spec["activation"],
            )
        elif kind == "maxpool3d":
            layer = MaxPool3dLayer(tuple(spec["pool"]))
        elif kind == "flatten":
            layer = FlattenLayer()
        elif kind == "dropout":
            layer = DropoutLayer(spec["rate"])
        else:
            if len(shape) != 1:
                raise FormatError(f"dense layer needs a flat input; add a flatten layer before it (got {shape})")
            layer = DenseLayer(
                np.zeros((spec["units"], shape[0]), dtype=dtype),
                np.zeros(spec["units"], dtype=dtype),
                spec["activation"],
            )
        shape = layer.output_shape(shape)
        layers.append(layer)
    if not layers or not isinstance(layers[-1], DenseLayer):
        raise FormatError("architecture must end with a dense layer feeding the softmax")
    if layers[-1].weights.shape[0] != 2 or layers[-1].activation != "linear":
        raise FormatError("final dense layer must be linear with exactly 2 units")
    return layers


@dataclass
class LayerCache:
    """Per-layer state recorded by a train-mode forward pass."""

    entries: list = field(default_factory=list)
    probs: np.ndarray | None = None


def model_forward(params: ModelParams, cuboid: np.ndarray, mode: str = "infer", rng: SplitMix64 | None = None):
    """Run the network on one cuboid. Returns ``(probs, cache)``; cache is None in infer mode."""
    if mode not in ("train", "infer"):
        raise UsageError(f"mode must be 'train' or 'infer', got {mode!r}")
    if tuple(cuboid.shape) != params.input_shape:
        raise ShapeError(f"cuboid shape {tuple(cuboid.shape)} != model input {params.input_shape}")
    train = mode == "train"
    x = np.ascontiguousarray(cuboid, dtype=params.dtype)
    entries = []
    for layer in params.layers:
        if isinstance(layer, Conv3dLayer):
            if train:
                x, c = conv3d_forward(layer, x)
                entries.append(c)
            else:
                x = conv3d_apply(layer, x)
        elif isinstance(layer, MaxPool3dLayer):
            x, c = maxpool3d_apply(layer, x)
            entries.append(c if train else None)
        elif isinstance(layer, FlattenLayer):
            entries.append(x.shape if train else None)
            x = x.reshape(-1)
        elif isinstance(layer, DropoutLayer):
            x, mask = dropout_apply(layer, x, mode, rng)
            entries.append(mask)
        else:
            if train:
                x, c = dense_forward(layer, x)
                entries.append(c)
            else:
                x = dense_apply(layer, x)
    probs = softmax(x)
    if not train:
        return probs, None
    return probs, LayerCache(entries, probs)


def predict(params: ModelParams, cuboid: np.ndarray) -> np.ndarray:
    """Infer-mode class probabilities."""
    return model_forward(params, cuboid, "infer")[0]


def model_backward(params: ModelParams, cache: LayerCache | None, label: int) -> list[np.ndarray]:
    """Gradients of the cross-entropy loss, aligned with ``params.parameters()``."""
    if cache is None or cache.probs is None:
        raise UsageError("model_backward needs the cache of a train-mode forward pass")
    if label not in (0, 1):
        raise UsageError(f"label must be 0 or 1, got {label!r}")
    g = cache.probs.copy()
    g[label] -= 1.0
    grads: list[np.ndarray] = []
    first_param = next(i for i, l in enumerate(params.layers) if l.params())
    for idx in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[idx]
        entry = cache.entries[idx]
        if isinstance(layer, Conv3dLayer):
            g, dw, db = conv3d_backward(layer, entry, g, need_input_grad=idx > first_param)
            grads[:0] = [dw, db]
        elif isinstance(layer, DenseLayer):
            g, dw, db = dense_backward(layer, entry, g)
            grads[:0] = [dw, db]
        elif isinstance(layer, MaxPool3dLayer):
            if idx > first_param:
                g = maxpool3d_backward(layer, entry, g)
        elif isinstance(layer, FlattenLayer):
            g = g.reshape(entry)
        elif entry is not None:
            g = g * entry
        if idx <= first_param:
            break
    return grads


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-ln(max(p[label], 1e-12))."""
    if label not in (0, 1):
        raise UsageError(f"label must be 0 or 1, got {label!r}")
    return -math.log(max(float(probs[label]), 1e-12))


# --------------------------------------------------------------------------- gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.abs(analytic)
    n = np.abs(numeric)
    denom = np.maximum(np.maximum(a, n), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(
    params: ModelParams,
    sample: tuple[np.ndarray, int],
    eps: float = 1e-5,
    seed: int = 0,
    backward: Callable = model_backward,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Both passes run in train mode with dropout masks drawn from a generator
    re-seeded to ``seed`` each time, so every evaluation sees the same masks.
    """
    if params.dtype != np.float64:
        raise UsageError("grad_check requires float64 parameters")
    x, label = sample
    x = np.asarray(x, dtype=np.float64)

    def loss() -> float:
        probs, _ = model_forward(params, x, "train", SplitMix64(seed))
        return cross_entropy(probs, label)

    _, cache = model_forward(params, x, "train", SplitMix64(seed))
    analytic = backward(params, cache, label)
    worst = 0.0
    for p, a in zip(params.parameters(), analytic):
        numeric = np.empty_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        worst = max(worst, relative_error(np.asarray(a), numeric))
    return worst


def _numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float) -> np.ndarray:
    out = np.empty_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out


def layer_grad_check(layer, x: np.ndarray, eps: float = 1e-5, seed: int = 0) -> float:
    """Gradient check for a single layer under the loss ``sum(r * layer(x))`` with random ``r``.

    Covers the input gradient and, for parameterized layers, weight and bias
    gradients. Dropout layers are checked with a fixed train-mode mask.
    """
    rng = SplitMix64(seed)
    x = np.array(x, dtype=np.float64)

    def forward(inp):
        if isinstance(layer, Conv3dLayer):
            return conv3d_forward(layer, inp)
        if isinstance(layer, DenseLayer):
            return dense_forward(layer, inp)
        if isinstance(layer, MaxPool3dLayer):
            return maxpool3d_apply(layer, inp)
        if isinstance(layer, DropoutLayer):
            return dropout_apply(layer, inp, "train", SplitMix64(seed + 1))
        raise UsageError(f"no gradient check for {type(layer).__name__}")

    out, cache = forward(x)
    r = rng.normal(out.size).reshape(out.shape)

    def loss() -> float:
        return float(np.sum(r * forward(x)[0]))

    if isinstance(layer, Conv3dLayer):
        dx, dw, db = conv3d_backward(layer, cache, r)
        pairs = [(dx, x), (dw, layer.weights), (db, layer.bias)]
    elif isinstance(layer, DenseLayer):
        dx, dw, db = dense_backward(layer, cache, r)
        pairs = [(dx, x), (dw, layer.weights), (db, layer.bias)]
    elif isinstance(layer, MaxPool3dLayer):
        pairs = [(maxpool3d_backward(layer, cache, r), x)]
    else:
        pairs = [(r * cache if cache is not None else r, x)]
    return max(relative_error(a, _numeric_grad(loss, arr, eps)) for a, arr in pairs)


# --------------------------------------------------------------------------- checkpoint


def checkpoint_bytes(params: ModelParams) -> bytes:
    """Serialize to HNM1: magic, u32 version, u32-length-prefixed JSON config, f32 LE tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg = json.dumps(params.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<II", params.format_version, len(cfg)))
    buf.write(cfg)
    for arr in params.parameters():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def write_checkpoint(path, params: ModelParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def parse_checkpoint(blob: bytes, dtype=np.float32) -> ModelParams:
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not an HNM1 checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    end = 12 + cfg_len
    if end > len(blob):
        raise FormatError("truncated checkpoint config")
    try:
        config = json.loads(blob[12:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint config: {exc}") from exc
    layers = build_layers(config, dtype)
    params = ModelParams(normalize_config(config), layers, version)
    arrays = []
    offset = end
    for p in params.parameters():
        nbytes = 4 * p.size
        if offset + nbytes > len(blob):
            raise FormatError("truncated checkpoint tensors")
        arr = np.frombuffer(blob, dtype="<f4", count=p.size, offset=offset).reshape(p.shape)
        arrays.append(arr.astype(dtype))
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes in checkpoint")
    params.set_parameters(arrays)
    return params


def read_checkpoint(path, dtype=np.float32) -> ModelParams:
    return parse_checkpoint(Path(path).read_bytes(), dtype)
