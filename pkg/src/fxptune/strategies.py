"""Fine-tuning procedures: float training, vanilla quantization-aware
fine-tuning, and the three mismatch-avoiding variants.

Every procedure keeps float master weights (unless ``fixed_point_master``),
takes a fixed-point view of them for each forward pass, back-propagates with
the presumed ReLU derivative and applies plain SGD to a trainable mask.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fixedpoint import AccumulatorOverflow, InvalidNumericInput
from .qforward import PrecisionAssignment, forward_quantized, quantize_weights
from .tensornet import NetworkSpec, Parameters, backward_presumed, iterate_minibatches, sgd_step

STRATEGIES = ("none", "vanilla", "p1", "p2", "p3")


@dataclass
class StrategyConfig:
    strategy: str = "vanilla"
    lr: float = 0.02
    epochs: int = 1
    batch_size: int = 32
    top_k_layers: int = 1
    divergence_factor: float = 3.0
    divergence_window: int = 200
    fixed_point_master: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> StrategyConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown strategy keys {sorted(unknown)}")
        return cls(**d)


class DivergenceMonitor:
    """Flags non-finite loss, or a running-mean loss above ``factor`` times
    ``reference`` (the loss at fine-tuning start) for ``window`` consecutive steps."""

    def __init__(self, reference: float, factor: float = 3.0, window: int = 200, decay: float = 0.95):
        self.reference, self.factor, self.window, self.decay = reference, factor, window, decay
        self.running = None
        self.streak = 0

    def update(self, loss: float) -> bool:
        if not math.isfinite(loss):
            return True
        self.running = loss if self.running is None else self.decay * self.running + (1 - self.decay) * loss
        self.streak = self.streak + 1 if self.running > self.factor * self.reference else 0
        return self.streak >= self.window


def starting_loss(net, params, assign, data, n: int = 640, batch_size: int = 128) -> float:
    """Mean loss of the untouched parameters on the first ``n`` training samples."""
    x, y = data
    n = min(n, len(x))
    losses = [
        forward_quantized(net, params, assign, x[i : i + batch_size], y[i : i + batch_size]).loss
        * len(x[i : i + batch_size])
        for i in range(0, n, batch_size)
    ]
    return float(sum(losses) / n)


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)
    diverged: bool = False
    reason: str = ""

    COLUMNS = ("step", "phase", "loss", "lr", "trainable_layer")

    def record(self, phase: int, loss: float, lr: float, trainable: str) -> None:
        self.rows.append((len(self.rows), phase, loss, lr, trainable))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for step, phase, loss, lr, layer in self.rows:
            w.writerow((step, phase, repr(float(loss)), repr(float(lr)), layer))
        return buf.getvalue()


@dataclass(frozen=True)
class Phase:
    trainable_layer: int
    fixed_point_activation_layers: frozenset[int]
    epochs: int


@dataclass(frozen=True)
class PhasePlan:
    """Bottom-to-top schedule; layer indices are 0-based."""

    phases: tuple[Phase, ...]

    def validate(self, num_layers: int) -> None:
        if not self.phases:
            raise ValueError("phase plan is empty (needs a network of at least 2 layers)")
        if len(self.phases) != num_layers - 1:
            raise ValueError(f"{num_layers}-layer network needs {num_layers - 1} phases, plan has {len(self.phases)}")
        for p, phase in enumerate(self.phases):
            if phase.trainable_layer != p + 1:
                raise ValueError(f"phase {p} must train layer {p + 1}, not {phase.trainable_layer}")
            if phase.fixed_point_activation_layers != frozenset(range(p + 1)):
                raise ValueError(f"phase {p} must fix activations of layers 0..{p}")
            if phase.epochs < 1:
                raise ValueError("each phase needs at least one epoch")


def build_phase_plan(num_layers: int, epochs_per_phase: int = 1) -> PhasePlan:
    if num_layers < 2:
        raise ValueError("bottom-to-top fine-tuning needs at least 2 layers")
    plan = PhasePlan(
        tuple(Phase(p + 1, frozenset(range(p + 1)), epochs_per_phase) for p in range(num_layers - 1))
    )
    plan.validate(num_layers)
    return plan


def _train(
    net: NetworkSpec,
    params: Parameters,
    assign: PrecisionAssignment,
    data,
    cfg: StrategyConfig,
    mask: Sequence[int],
    epochs: int,
    log: TrainLog,
    rng: np.random.Generator,
    phase: int = 0,
) -> Parameters:
    x, y = data
    mask = sorted(mask)
    label = "all" if len(mask) == len(net) else ";".join(map(str, mask))
    try:
        reference = starting_loss(net, params, assign, data)
    except (InvalidNumericInput, AccumulatorOverflow) as e:
        log.diverged, log.reason = True, f"{type(e).__name__}: {e}"
        return params
    monitor = DivergenceMonitor(reference, cfg.divergence_factor, cfg.divergence_window)
    for _ in range(epochs):
        for idx in iterate_minibatches(len(x), cfg.batch_size, rng):
            try:
                view = quantize_weights(params, assign)
                cache = forward_quantized(net, view, assign, x[idx], y[idx])
            except (InvalidNumericInput, AccumulatorOverflow) as e:
                log.diverged, log.reason = True, f"{type(e).__name__}: {e}"
                return params
            grads = backward_presumed(net, cache)
            log.record(phase, cache.loss, cfg.lr, label)
            if monitor.update(cache.loss):
                log.diverged = True
                log.reason = "non-finite loss" if not math.isfinite(cache.loss) else "sustained loss inflation"
                return params
            params = sgd_step(params, grads, cfg.lr, mask)
            if cfg.fixed_point_master:
                stored = quantize_weights(params, assign)
                params = Parameters(
                    [stored.weights[i] if i in mask else w for i, w in enumerate(params.weights)], params.biases
                )
    return params


def train_float(net, params, data, cfg: StrategyConfig) -> tuple[Parameters, TrainLog]:
    """Ordinary full-precision training of every layer."""
    log = TrainLog()
    rng = np.random.default_rng(cfg.seed)
    params = _train(net, params, PrecisionAssignment.float(len(net)), data, cfg, range(len(net)), cfg.epochs, log, rng)
    return params, log


def finetune_vanilla(net, params, assign: PrecisionAssignment, data, cfg: StrategyConfig):
    """All layers trained under the full target assignment."""
    log = TrainLog()
    rng = np.random.default_rng(cfg.seed)
    params = _train(net, params, assign, data, cfg, range(len(net)), cfg.epochs, log, rng)
    return params, log


def weights_only_assignment(num_layers: int, weight_bits) -> PrecisionAssignment:
    if weight_bits is None or isinstance(weight_bits, int):
        weight_bits = (weight_bits,) * num_layers
    return PrecisionAssignment(tuple(weight_bits), (None,) * num_layers)


def finetune_p1(net, params, weight_bits, data, cfg: StrategyConfig):
    """Fixed-point weight views with float activations everywhere.

    The result can afterwards be evaluated under any activation precision.
    """
    return finetune_vanilla(net, params, weights_only_assignment(len(net), weight_bits), data, cfg)


def top_layers_mask(num_layers: int, k: int) -> list[int]:
    if not 1 <= k < num_layers:
        raise ValueError(f"top_k_layers must be in [1, {num_layers - 1}], got {k}")
    return list(range(num_layers - k, num_layers))


def finetune_p2(net, params, assign: PrecisionAssignment, data, cfg: StrategyConfig):
    """Full target assignment, but only the top ``cfg.top_k_layers`` layers learn."""
    mask = top_layers_mask(len(net), cfg.top_k_layers)
    log = TrainLog()
    rng = np.random.default_rng(cfg.seed)
    params = _train(net, params, assign, data, cfg, mask, cfg.epochs, log, rng)
    return params, log


def phase_assignment(assign: PrecisionAssignment, phase: Phase) -> PrecisionAssignment:
    """Target weights everywhere; fixed-point activations only below the trainable layer."""
    return assign.with_fixed_activations(phase.fixed_point_activation_layers)


def finetune_p3(net, params, assign: PrecisionAssignment, data, plan: PhasePlan, cfg: StrategyConfig):
    """Bottom-to-top: phase p trains layer p+1 with activations 0..p fixed point."""
    plan.validate(len(net))
    log = TrainLog()
    rng = np.random.default_rng(cfg.seed)
    for p, phase in enumerate(plan.phases):
        params = _train(
            net, params, phase_assignment(assign, phase), data, cfg, [phase.trainable_layer], phase.epochs, log, rng, p
        )
        if log.diverged:
            break
    return params, log
