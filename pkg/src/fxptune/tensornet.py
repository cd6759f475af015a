"""Minimal conv/fc layer stack: forward pass, presumed-gradient backprop, SGD.

Arrays are NCHW for convolution layers and (N, features) for fully-connected
ones; the first fully-connected layer after a convolution flattens its input.
Layer indices are 0-based throughout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CONV = "conv"
FC = "fc"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_size: int
    out_size: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    relu: bool = True
    pool: int = 0
    weight_bits: int | None = None
    act_bits: int | None = None

    def __post_init__(self):
        if self.kind not in (CONV, FC):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == FC and (self.kernel != 1 or self.pool):
            raise ValueError("fully-connected layers take no kernel or pooling")
        for bits in (self.weight_bits, self.act_bits):
            if bits is not None and bits not in (4, 8, 16, 32):
                raise ValueError(f"unsupported bit-width {bits}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == CONV:
            return (self.out_size, self.in_size, self.kernel, self.kernel)
        return (self.out_size, self.in_size)

    @property
    def fan_in(self) -> int:
        return self.in_size * self.kernel * self.kernel


def conv(in_ch, out_ch, kernel=3, padding=1, stride=1, relu=True, pool=0) -> LayerSpec:
    return LayerSpec(CONV, in_ch, out_ch, kernel, stride, padding, relu, pool)


def fc(in_features, out_features, relu=True) -> LayerSpec:
    return LayerSpec(FC, in_features, out_features, relu=relu)


@dataclass(frozen=True)
class NetworkSpec:
    """An ordered layer stack ending in softmax cross-entropy."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    loss: str = "softmax_cross_entropy"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        self.shapes()

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_size

    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Per-layer (input shape, output shape after pooling), batch dim omitted."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind == CONV:
                if len(shape) != 3 or shape[0] != layer.in_size:
                    raise ValueError(f"layer {i}: expected ({layer.in_size}, H, W) input, got {shape}")
                _, h, w = shape
                ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if ho <= 0 or wo <= 0:
                    raise ValueError(f"layer {i}: kernel larger than input")
                if layer.pool:
                    if ho % layer.pool or wo % layer.pool:
                        raise ValueError(f"layer {i}: {ho}x{wo} not divisible by pool {layer.pool}")
                    ho, wo = ho // layer.pool, wo // layer.pool
                new = (layer.out_size, ho, wo)
            else:
                if int(np.prod(shape)) != layer.in_size:
                    raise ValueError(f"layer {i}: expected {layer.in_size} features, got {shape}")
                new = (layer.out_size,)
            out.append((shape, new))
            shape = new
        return out

    def with_bits(self, weight_bits: int | None, act_bits: int | None, final_act_bits: int = 16):
        """Uniform grid assignment; the last layer's activations stay at ``final_act_bits``."""
        quantized = weight_bits is not None or act_bits is not None
        layers = [replace(l, weight_bits=weight_bits, act_bits=act_bits) for l in self.layers]
        layers[-1] = replace(layers[-1], act_bits=final_act_bits if quantized else None)
        return replace(self, layers=tuple(layers))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [
                {k: getattr(l, k) for k in LayerSpec.__dataclass_fields__} for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), tuple(d["input_shape"]))


@dataclass
class Parameters:
    """Full-precision master weights and biases, one pair per layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, net: NetworkSpec, rng: np.random.Generator) -> Parameters:
        """Uniform fan-in (He) initialization, zero biases."""
        weights, biases = [], []
        for layer in net.layers:
            limit = np.sqrt(6.0 / layer.fan_in)
            weights.append(rng.uniform(-limit, limit, size=layer.weight_shape))
            biases.append(np.zeros(layer.out_size))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, net: NetworkSpec) -> Parameters:
        return cls([np.zeros(l.weight_shape) for l in net.layers], [np.zeros(l.out_size) for l in net.layers])

    def copy(self) -> Parameters:
        return Parameters([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check(self, net: NetworkSpec) -> None:
        if len(self.weights) != len(net) or len(self.biases) != len(net):
            raise ValueError("parameter count does not match network")
        for i, layer in enumerate(net.layers):
            if self.weights[i].shape != layer.weight_shape or self.biases[i].shape != (layer.out_size,):
                raise ValueError(f"layer {i}: parameter shapes do not match spec")

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass
class LayerCache:
    x: np.ndarray
    weight: np.ndarray
    pre: np.ndarray
    out: np.ndarray
    cols: np.ndarray | None = None
    pool_arg: np.ndarray | None = None
    flattened_from: tuple[int, ...] | None = None


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    logits: np.ndarray
    loss: float | None = None
    labels: np.ndarray | None = None

    @property
    def pre_activations(self) -> list[np.ndarray]:
        return [c.pre for c in self.layers]

    @property
    def activations(self) -> list[np.ndarray]:
        return [c.out for c in self.layers]


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    errors: list[np.ndarray] = field(default_factory=list)


def im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kernel * kernel)


def col2im(dcols, x_shape, kernel, stride, padding, ho, wo) -> np.ndarray:
    n, c, h, w = x_shape
    d = dcols.reshape(n, ho, wo, c, kernel, kernel)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def maxpool(x: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping p x p max pool; ties go to the first window position."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // p, w // p, p * p)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def maxpool_backward(dy: np.ndarray, arg: np.ndarray, p: int) -> np.ndarray:
    n, c, hp, wp = dy.shape
    win = np.zeros((n, c, hp, wp, p * p))
    np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
    return win.reshape(n, c, hp, wp, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp * p, wp * p)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# Hooks used by the quantized forward pass: (layer index, cols, weight matrix) -> pre-bias
# sums; and (layer index, pre-activation) -> activation.
Affine = Callable[[int, np.ndarray, np.ndarray], np.ndarray]
Activate = Callable[[int, np.ndarray], np.ndarray]


def run_forward(
    net: NetworkSpec,
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    batch: np.ndarray,
    labels: np.ndarray | None = None,
    affine: Affine | None = None,
    activate: Activate | None = None,
) -> ForwardCache:
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} does not match network input {net.input_shape}")
    caches = []
    for i, layer in enumerate(net.layers):
        w, b = weights[i], biases[i]
        wmat = w.reshape(layer.out_size, -1)
        flattened_from = None
        if layer.kind == CONV:
            n, _, h, wd = x.shape
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (wd + 2 * layer.padding - layer.kernel) // layer.stride + 1
            cols = im2col(x, layer.kernel, layer.stride, layer.padding)
            s = affine(i, cols, wmat) if affine else cols @ wmat.T
            pre = (s + b).reshape(n, ho, wo, layer.out_size).transpose(0, 3, 1, 2)
        else:
            if x.ndim > 2:
                flattened_from = x.shape[1:]
                x = x.reshape(x.shape[0], -1)
            cols = None
            s = affine(i, x, wmat) if affine else x @ wmat.T
            pre = s + b
        if activate is not None:
            out = activate(i, pre)
        else:
            out = relu(pre) if layer.relu else pre
        cache = LayerCache(x=x, weight=w, pre=pre, out=out, cols=cols, flattened_from=flattened_from)
        if layer.pool:
            out, cache.pool_arg = maxpool(out, layer.pool)
        caches.append(cache)
        x = out
    result = ForwardCache(caches, logits=x, labels=labels)
    if labels is not None:
        result.loss, _ = softmax_cross_entropy(x, labels)
    return result


def forward_float(net: NetworkSpec, params: Parameters, batch: np.ndarray, labels=None) -> ForwardCache:
    """Full-precision forward pass with exact ReLU."""
    return run_forward(net, params.weights, params.biases, batch, labels)


def backward_presumed(
    net: NetworkSpec,
    cache: ForwardCache | None,
    labels: np.ndarray | None = None,
    output_grad: np.ndarray | None = None,
) -> GradientSet:
    """Back-propagate using the presumed ReLU derivative ``1{a > 0}``.

    The derivative is evaluated at whatever pre-activations the forward pass
    produced, and error signals flow through the weights that forward pass
    actually used, so quantization is invisible here. ``output_grad`` replaces
    the softmax cross-entropy gradient at the logits when given.
    """
    if cache is None or len(cache.layers) != len(net):
        raise ValueError("backward pass needs the cache of a forward pass over this network")
    if output_grad is None:
        labels = cache.labels if labels is None else labels
        if labels is None:
            raise ValueError("labels required for the cross-entropy gradient")
        _, grad = softmax_cross_entropy(cache.logits, np.asarray(labels))
    else:
        grad = np.asarray(output_grad, dtype=np.float64)
    L = len(net)
    dws, dbs, errors = [None] * L, [None] * L, [None] * L
    for i in range(L - 1, -1, -1):
        layer, c = net.layers[i], cache.layers[i]
        if layer.pool:
            grad = maxpool_backward(grad, c.pool_arg, layer.pool)
        delta = grad * (c.pre > 0) if layer.relu else grad
        errors[i] = delta
        wmat = c.weight.reshape(layer.out_size, -1)
        if layer.kind == CONV:
            d2 = delta.transpose(0, 2, 3, 1).reshape(-1, layer.out_size)
            dws[i] = (d2.T @ c.cols).reshape(layer.weight_shape)
            dbs[i] = d2.sum(axis=0)
            if i:
                n, _, ho, wo = delta.shape
                grad = col2im(d2 @ wmat, c.x.shape, layer.kernel, layer.stride, layer.padding, ho, wo)
        else:
            dws[i] = delta.T @ c.x
            dbs[i] = delta.sum(axis=0)
            if i:
                grad = delta @ wmat
                if c.flattened_from is not None:
                    grad = grad.reshape((-1,) + c.flattened_from)
    return GradientSet(dws, dbs, errors)


def sgd_step(params: Parameters, grads: GradientSet, lr: float, mask: Iterable[int]) -> Parameters:
    """Plain SGD on the layers in ``mask``; other layers share arrays with ``params``."""
    mask = set(mask)
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not mask:
        raise ValueError("empty trainable mask")
    if not mask <= set(range(len(params.weights))):
        raise ValueError(f"mask {sorted(mask)} has layers outside the network")
    weights, biases = list(params.weights), list(params.biases)
    for i in mask:
        weights[i] = weights[i] - lr * grads.weights[i]
        biases[i] = biases[i] - lr * grads.biases[i]
    return Parameters(weights, biases)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# Checkpoint container: 8-byte magic, little-endian u64 header length, UTF-8
# JSON header, then the tensor bytes back to back (offsets relative to the
# start of that data section).
MAGIC = b"FXPTCKPT"


def save_parameters(path, params: Parameters, formats=None, metadata: dict | None = None) -> None:
    """Write ``params``; ``formats`` optionally maps tensor name -> Q-format label."""
    formats = formats or {}
    entries, blobs, offset = [], [], 0
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        for name, arr in ((f"layer{i}.weight", w), (f"layer{i}.bias", b)):
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": "<f8",
                    "offset": offset,
                    "nbytes": len(data),
                    "qformat": formats.get(name),
                }
            )
            blobs.append(data)
            offset += len(data)
    header = json.dumps({"version": 1, "tensors": entries, "metadata": metadata or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for data in blobs:
            f.write(data)


def load_parameters(path) -> tuple[Parameters, dict]:
    """Read a checkpoint; returns the parameters and the parsed header."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise ValueError(f"{path}: tensor {e['name']} runs past end of file")
        buf = raw[start : start + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float64)
    n = len(header["tensors"]) // 2
    params = Parameters(
        [tensors[f"layer{i}.weight"] for i in range(n)], [tensors[f"layer{i}.bias"] for i in range(n)]
    )
    return params, header
