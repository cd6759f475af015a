"""Gradient-mismatch measurements.

Presumed gradients under a quantized forward pass are compared layer by layer
with the float-network gradients at the same master weights; a second check
asks whether the presumed direction still lowers the quantized loss when
stepped by a few activation LSBs.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from .qforward import PrecisionAssignment, forward_quantized, quantize_weights
from .tensornet import NetworkSpec, Parameters, backward_presumed, forward_float

UNDEFINED = "undefined"
# Activation unit used by descent_check when no layer has a fixed-point format.
FLOAT_UNIT = 2.0**-20


@dataclass
class LayerMismatch:
    layer: int
    cosine_mean: float
    rel_err_mean: float
    flag: str
    batches: int


@dataclass
class MismatchReport:
    layers: list[LayerMismatch]
    batch_count: int
    assignment: dict = field(default_factory=dict)

    def defined(self) -> list[LayerMismatch]:
        return [l for l in self.layers if l.flag != UNDEFINED]

    def rel_errors(self) -> np.ndarray:
        return np.array([l.rel_err_mean for l in self.layers])

    def depth_spearman(self) -> float:
        """Rank correlation of relative error with depth below the top layer."""
        rows = self.defined()
        depth = [len(self.layers) - 1 - l.layer for l in rows]
        if len(rows) < 3:
            return float("nan")
        return float(spearmanr(depth, [l.rel_err_mean for l in rows]).statistic)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("layer", "cosine_mean", "rel_err_mean", "flag"))
        for l in self.layers:
            w.writerow((l.layer, f"{l.cosine_mean:.6f}", f"{l.rel_err_mean:.6f}", l.flag))
        return buf.getvalue()

    def to_json(self) -> str:
        body = {
            "batch_count": self.batch_count,
            "assignment": self.assignment,
            "depth_spearman": self.depth_spearman(),
            "layers": [asdict(l) for l in self.layers],
        }
        return json.dumps(body, indent=2, sort_keys=True, default=_nan_to_none)


def _nan_to_none(o):
    return None


def _flat(arr_list):
    return [a.reshape(-1) for a in arr_list]


def mismatch_per_layer(net: NetworkSpec, params: Parameters, assign: PrecisionAssignment, batches) -> MismatchReport:
    """Average per-layer cosine and relative L2 error of weight gradients.

    ``batches`` yields ``(x, y)`` pairs. A layer whose gradient is all zero in
    either pass is skipped for that batch, and flagged when never defined.
    """
    L = len(net)
    cos_sum, rel_sum, counts = np.zeros(L), np.zeros(L), np.zeros(L, dtype=int)
    n_batches = 0
    for x, y in batches:
        n_batches += 1
        gq = backward_presumed(net, forward_quantized(net, params, assign, x, y))
        gf = backward_presumed(net, forward_float(net, params, x, y))
        for l, (q, f) in enumerate(zip(_flat(gq.weights), _flat(gf.weights))):
            nq, nf = np.linalg.norm(q), np.linalg.norm(f)
            if nq == 0 or nf == 0:
                continue
            cos_sum[l] += min(1.0, max(-1.0, float(q @ f) / (nq * nf)))
            rel_sum[l] += np.linalg.norm(q - f) / nf
            counts[l] += 1
    layers = []
    for l in range(L):
        if counts[l]:
            layers.append(LayerMismatch(l, cos_sum[l] / counts[l], rel_sum[l] / counts[l], "ok", int(counts[l])))
        else:
            layers.append(LayerMismatch(l, math.nan, math.nan, UNDEFINED, 0))
    return MismatchReport(layers, n_batches, assign.describe())


@dataclass
class DescentReport:
    slope: float
    grad_norm: float
    eta: float
    loss_minus: float
    loss_plus: float
    flag: str

    @property
    def descends(self) -> bool:
        return self.flag == "descent"


def _shifted(params: Parameters, direction, scale: float) -> Parameters:
    return Parameters([w + scale * d for w, d in zip(params.weights, direction)], list(params.biases))


def descent_check(
    net: NetworkSpec,
    params: Parameters,
    assign: PrecisionAssignment,
    batch,
    step_scale: float = 1.0,
    probe: float = 1e-6,
) -> DescentReport:
    """Central-difference slope of the quantized loss along the presumed gradient.

    Moves are applied to the weights the forward pass uses (the fixed-point
    view, taken as real values), so the weight grid cannot mask the
    activation staircase being probed. The step ``eta`` is sized so the
    largest first-order change of any fixed-point layer's pre-activation is
    ``step_scale`` of that layer's LSB (``FLOAT_UNIT`` stands in when no
    activation is fixed point). The slope is
    ``[C(w + eta d) - C(w - eta d)] / (2 eta |d|)``: positive means stepping
    against the presumed gradient lowers the quantized loss, and for float
    networks it equals ``|d|``. Only weights move.
    """
    if not step_scale > 0:
        raise ValueError("step_scale must be positive")
    x, y = batch
    view = quantize_weights(params, assign)
    cache = forward_quantized(net, view, assign, x, y)
    d = backward_presumed(net, cache).weights
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in d))
    if norm == 0:
        return DescentReport(0.0, 0.0, 0.0, cache.loss, cache.loss, "zero-gradient")

    base = Parameters(view.weights, view.biases)
    acts_only = replace(assign, weight_bits=(None,) * len(net), weight_formats=None)
    # first-order pre-activation change per unit step along d / |d|, measured on a float-activation pass
    linear = PrecisionAssignment.float(len(net))
    unit = [g / norm for g in d]
    hi = forward_quantized(net, _shifted(base, unit, probe), linear, x)
    lo = forward_quantized(net, _shifted(base, unit, -probe), linear, x)
    sensitivity = 0.0
    for l, (a, b) in enumerate(zip(hi.layers, lo.layers)):
        fmt = assign.act_formats[l]
        unit_size = FLOAT_UNIT if fmt is None else fmt.lsb
        if fmt is None and assign.fixed_activation_layers():
            continue
        sensitivity = max(sensitivity, float(np.sqrt(np.mean((a.pre - b.pre) ** 2))) / (2 * probe) / unit_size)
    length = step_scale / sensitivity if sensitivity > 0 else step_scale * FLOAT_UNIT
    eta = length / norm

    minus = forward_quantized(net, _shifted(base, d, -eta), acts_only, x, y).loss
    plus = forward_quantized(net, _shifted(base, d, eta), acts_only, x, y).loss
    slope = (plus - minus) / (2 * eta * norm)
    if minus == plus:
        flag = "flat"
    else:
        flag = "descent" if slope > 0 else "ascent"
    return DescentReport(slope, norm, eta, minus, plus, flag)
