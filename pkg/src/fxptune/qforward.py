"""Emulated fixed-point forward pass with per-layer mixed precision.

A layer whose input and weights are both fixed point runs the integer
pipeline: exact widening products, exact wide accumulation, then rounding to
the layer's activation format after ReLU. Layers with float weights or float
input run in float64. Biases stay full precision and are added to the
accumulated sum before rounding.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .fixedpoint import (
    Accumulator,
    AccumulatorOverflow,
    QFormat,
    choose_format,
    fake_quantize,
    format_label,
    requantize,
)
from .tensornet import ForwardCache, NetworkSpec, Parameters, relu, run_forward

_EXACT_FLOAT = 2.0**52
_INT64_SAFE = 2.0**62


@dataclass(frozen=True)
class PrecisionAssignment:
    """Per-layer number formats for one forward configuration.

    ``weight_bits[i]`` is a bit-width (format re-chosen from the current
    weights at every view) or ``None`` for float weights; ``weight_formats``
    pins explicit formats instead. ``act_formats[i]`` is the frozen format of
    layer ``i``'s output, ``None`` for float. ``input_format`` quantizes the
    network input.
    """

    weight_bits: tuple[int | None, ...]
    act_formats: tuple[QFormat | None, ...]
    input_format: QFormat | None = None
    weight_formats: tuple[QFormat | None, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "weight_bits", tuple(self.weight_bits))
        object.__setattr__(self, "act_formats", tuple(self.act_formats))
        if self.weight_formats is not None:
            object.__setattr__(self, "weight_formats", tuple(self.weight_formats))
        if len(self.weight_bits) != len(self.act_formats):
            raise ValueError("weight and activation assignments differ in length")

    @classmethod
    def float(cls, num_layers: int) -> PrecisionAssignment:
        return cls((None,) * num_layers, (None,) * num_layers)

    def __len__(self) -> int:
        return len(self.act_formats)

    @property
    def is_float(self) -> bool:
        return (
            self.input_format is None
            and all(b is None for b in self.weight_bits)
            and all(f is None for f in self.act_formats)
            and (self.weight_formats is None or all(f is None for f in self.weight_formats))
        )

    def weights_quantized(self, i: int) -> bool:
        if self.weight_formats is not None and self.weight_formats[i] is not None:
            return True
        return self.weight_bits[i] is not None

    def with_fixed_activations(self, layers: Iterable[int]) -> PrecisionAssignment:
        """Keep fixed-point activations only on ``layers`` (weights untouched).

        The input stays quantized only while layer 0's activations are fixed.
        """
        keep = set(layers)
        acts = tuple(f if i in keep else None for i, f in enumerate(self.act_formats))
        return replace(self, act_formats=acts, input_format=self.input_format if 0 in keep else None)

    def fixed_activation_layers(self) -> set[int]:
        return {i for i, f in enumerate(self.act_formats) if f is not None}

    def smallest_act_lsb(self) -> float | None:
        lsbs = [f.lsb for f in self.act_formats if f is not None]
        return min(lsbs) if lsbs else None

    def describe(self) -> dict:
        return {
            "weight_bits": ["float" if b is None else b for b in self.weight_bits],
            "act_formats": [format_label(f) for f in self.act_formats],
            "input_format": format_label(self.input_format),
        }


@dataclass
class QuantizedView:
    """Weights as the forward pass sees them; the master copy is untouched."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    formats: list[QFormat | None]


def weight_format(w: np.ndarray, assign: PrecisionAssignment, i: int) -> QFormat | None:
    if assign.weight_formats is not None and assign.weight_formats[i] is not None:
        return assign.weight_formats[i]
    bits = assign.weight_bits[i]
    return None if bits is None else choose_format(w, bits)


def quantize_weights(params: Parameters, assign: PrecisionAssignment) -> QuantizedView:
    weights, formats = [], []
    for i, w in enumerate(params.weights):
        fmt = weight_format(w, assign, i)
        weights.append(w if fmt is None else fake_quantize(w, fmt))
        formats.append(fmt)
    return QuantizedView(weights, list(params.biases), formats)


def effective_relu(value, act_fmt: QFormat | None, apply_relu: bool = True):
    """ReLU followed by rounding to ``act_fmt``: a saturating staircase.

    ``value`` may be an :class:`Accumulator` (pure integer path) or real
    numbers. With ``act_fmt=None`` this is the exact ReLU.
    """
    if isinstance(value, Accumulator):
        acc = Accumulator(max(0, value.raw), value.frac_bits) if apply_relu else value
        return acc.value if act_fmt is None else requantize(acc, act_fmt).value
    x = relu(np.asarray(value, dtype=np.float64)) if apply_relu else np.asarray(value, dtype=np.float64)
    return x if act_fmt is None else fake_quantize(x, act_fmt)


def exact_int_matmul(a_raw: np.ndarray, b_raw: np.ndarray) -> np.ndarray:
    """``a_raw @ b_raw.T`` for integer-valued operands with every sum exact.

    Uses float64 BLAS when the worst-case sum of |products| stays below 2**52
    (all partial sums are then exact integers), int64 otherwise.
    """
    max_a = float(np.abs(a_raw).max(initial=0.0))
    bound = max_a * float(np.abs(b_raw).sum(axis=1).max(initial=0.0))
    if bound < _EXACT_FLOAT:
        return a_raw @ b_raw.T
    if max_a * float(np.abs(b_raw).max(initial=0.0)) >= _INT64_SAFE:
        raise AccumulatorOverflow("single product exceeds the 64-bit accumulator")
    estimate = a_raw @ b_raw.T
    if np.abs(estimate).max(initial=0.0) >= _INT64_SAFE:
        raise AccumulatorOverflow("accumulated sum exceeds the 64-bit accumulator")
    return (a_raw.astype(np.int64) @ b_raw.astype(np.int64).T).astype(np.float64)


def forward_quantized(
    net: NetworkSpec,
    params: Parameters | QuantizedView,
    assign: PrecisionAssignment,
    batch: np.ndarray,
    labels: np.ndarray | None = None,
) -> ForwardCache:
    """Forward pass under ``assign``; the cache feeds ``backward_presumed`` as is."""
    if len(assign) != len(net):
        raise ValueError("assignment length does not match network")
    view = params if isinstance(params, QuantizedView) else quantize_weights(params, assign)
    x = np.asarray(batch, dtype=np.float64)
    if assign.input_format is not None:
        x = fake_quantize(x, assign.input_format)
    in_formats = (assign.input_format,) + assign.act_formats[:-1]

    def affine(i: int, cols: np.ndarray, wmat: np.ndarray) -> np.ndarray:
        fin, fw = in_formats[i], view.formats[i]
        if fin is None or fw is None:
            return cols @ wmat.T
        acc = exact_int_matmul(np.ldexp(cols, fin.frac_bits), np.ldexp(wmat, fw.frac_bits))
        return np.ldexp(acc, -(fin.frac_bits + fw.frac_bits))

    def activate(i: int, pre: np.ndarray) -> np.ndarray:
        return effective_relu(pre, assign.act_formats[i], net.layers[i].relu)

    return run_forward(net, view.weights, view.biases, x, labels, affine=affine, activate=activate)


def calibrate(
    net: NetworkSpec,
    params: Parameters,
    batch: np.ndarray,
    weight_bits: Sequence[int | None] | None = None,
    act_bits: Sequence[int | None] | None = None,
) -> PrecisionAssignment:
    """Choose activation formats from one calibration batch.

    Bit-widths default to the ``LayerSpec`` fields. Statistics come from a
    pass with weights already at their target precision and float
    activations; the input format uses layer 0's activation bit-width.
    """
    weight_bits = tuple(l.weight_bits for l in net.layers) if weight_bits is None else tuple(weight_bits)
    act_bits = tuple(l.act_bits for l in net.layers) if act_bits is None else tuple(act_bits)
    probe = PrecisionAssignment(weight_bits, (None,) * len(net))
    cache = forward_quantized(net, params, probe, batch)
    acts = tuple(
        None if bits is None else choose_format(cache.layers[i].out, bits) for i, bits in enumerate(act_bits)
    )
    input_format = None if act_bits[0] is None else choose_format(batch, act_bits[0])
    return PrecisionAssignment(weight_bits, acts, input_format)


def grid_assignment(net, params, batch, weight_bits, act_bits, final_act_bits=16) -> PrecisionAssignment:
    """Uniform-width assignment for one grid cell, calibrated on ``batch``."""
    return calibrate(net.with_bits(weight_bits, act_bits, final_act_bits), params, batch)
