"""Run configs, top-k evaluation and the weight x activation bit-width grid."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..qforward import PrecisionAssignment, forward_quantized, grid_assignment
from ..strategies import (
    StrategyConfig,
    build_phase_plan,
    finetune_p1,
    finetune_p2,
    finetune_p3,
    finetune_vanilla,
    train_float,
)
from ..tensornet import NetworkSpec, Parameters, load_parameters, save_parameters
from .data import Dataset, DatasetSpec, load_dataset
from .nets import build_network

BIT_CHOICES = (4, 8, 16, None)
NA = "n/a"


def parse_bits(value) -> int | None:
    if value is None or value == "float":
        return None
    bits = int(value)
    if bits not in (4, 8, 16):
        raise ValueError(f"grid bit-widths must be 4, 8, 16 or float, got {value!r}")
    return bits


def bits_label(bits: int | None) -> str:
    return "float" if bits is None else str(bits)


def evaluate_topk(net, params, assign, data, k: int = 1, batch_size: int = 500) -> float:
    """Percentage of samples whose label is not among the top ``k`` logits.

    Equal logits rank the lower class index first.
    """
    x, y = data
    if not 1 <= k < net.num_classes:
        raise ValueError(f"k must be in [1, {net.num_classes - 1}]")
    wrong = 0
    for i in range(0, len(x), batch_size):
        z = forward_quantized(net, params, assign, x[i : i + batch_size]).logits
        wrong += int(np.sum(topk_rank(z, y[i : i + batch_size]) >= k))
    return 100.0 * wrong / len(x)


def topk_rank(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """0-based rank of each true label under the lower-index tie-break."""
    labels = np.asarray(labels)
    true = logits[np.arange(len(labels)), labels][:, None]
    idx = np.arange(logits.shape[1])[None]
    ahead = (logits > true) | ((logits == true) & (idx < labels[:, None]))
    return ahead.sum(axis=1)


@dataclass
class PretrainConfig:
    lr: float = 0.05
    epochs: int = 8
    tail_lr: float = 0.01
    tail_epochs: int = 2
    batch_size: int = 32


@dataclass
class RunConfig:
    network: dict = field(default_factory=lambda: {"preset": "desk8"})
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    strategy: StrategyConfig = field(default_factory=lambda: StrategyConfig(strategy="none"))
    weight_bits: tuple = BIT_CHOICES
    act_bits: tuple = BIT_CHOICES
    final_act_bits: int = 16
    top_k: int = 1
    calib_size: int = 256
    seed: int = 0
    checkpoint: str | None = None
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.weight_bits = tuple(parse_bits(b) for b in self.weight_bits)
        self.act_bits = tuple(parse_bits(b) for b in self.act_bits)
        if not self.weight_bits or not self.act_bits:
            raise ValueError("grid needs at least one weight and one activation bit-width")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "dataset" in d:
            d["dataset"] = DatasetSpec.from_dict(d["dataset"])
        if "pretrain" in d:
            d["pretrain"] = PretrainConfig(**d["pretrain"])
        if "strategy" in d:
            d["strategy"] = StrategyConfig.from_dict(d["strategy"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_bits"] = [bits_label(b) for b in self.weight_bits]
        d["act_bits"] = [bits_label(b) for b in self.act_bits]
        return d


@dataclass
class Experiment:
    """Everything a grid cell needs: data, network, float checkpoint."""

    cfg: RunConfig
    data: Dataset
    net: NetworkSpec
    float_params: Parameters

    @property
    def calib(self) -> np.ndarray:
        return self.data.train_x[: self.cfg.calib_size]

    @property
    def train(self):
        return self.data.train_x, self.data.train_y

    @property
    def val(self):
        return self.data.val_x, self.data.val_y

    def strategy_cfg(self) -> StrategyConfig:
        s = self.cfg.strategy
        return StrategyConfig(**{**asdict(s), "seed": self.cfg.seed})

    def assignment(self, params, weight_bits, act_bits) -> PrecisionAssignment:
        return grid_assignment(self.net, params, self.calib, weight_bits, act_bits, self.cfg.final_act_bits)

    def error(self, params, assign) -> float:
        return evaluate_topk(self.net, params, assign, self.val, self.cfg.top_k)


def pretrain_float(net, data: Dataset, pre: PretrainConfig, seed: int) -> Parameters:
    params = Parameters.init(net, np.random.default_rng(seed))
    train = (data.train_x, data.train_y)
    params, _ = train_float(net, params, train, StrategyConfig(lr=pre.lr, epochs=pre.epochs, batch_size=pre.batch_size, seed=seed))
    if pre.tail_epochs:
        params, _ = train_float(
            net, params, train,
            StrategyConfig(lr=pre.tail_lr, epochs=pre.tail_epochs, batch_size=pre.batch_size, seed=seed + 1),
        )
    return params


def prepare(cfg: RunConfig, data: Dataset | None = None, float_params: Parameters | None = None) -> Experiment:
    """Load data and the float checkpoint, training and saving one if absent."""
    data = load_dataset(cfg.dataset) if data is None else data
    net = build_network(cfg.network, data.input_shape, data.num_classes)
    if float_params is None:
        if cfg.checkpoint and Path(cfg.checkpoint).exists():
            float_params, _ = load_parameters(cfg.checkpoint)
            float_params.check(net)
        else:
            float_params = pretrain_float(net, data, cfg.pretrain, cfg.seed)
            if cfg.checkpoint:
                Path(cfg.checkpoint).parent.mkdir(parents=True, exist_ok=True)
                save_parameters(cfg.checkpoint, float_params, metadata={"network": net.to_dict()})
    return Experiment(cfg, data, net, float_params)


@dataclass
class CellResult:
    params: Parameters
    assign: PrecisionAssignment
    error: float | str
    diverged: bool = False
    logs: list = field(default_factory=list)


def run_cell(exp: Experiment, weight_bits, act_bits, p1_cache: dict | None = None) -> CellResult:
    """Apply the configured strategy to one (weight, activation) cell.

    Float activations leave nothing to mismatch: fine-tuning strategies report
    the weight-only (P1) network there, and float/float is the baseline.
    """
    cfg = exp.strategy_cfg()
    base = exp.float_params
    if cfg.strategy == "none" or (weight_bits is None and act_bits is None):
        assign = exp.assignment(base, weight_bits, act_bits)
        return CellResult(base, assign, exp.error(base, assign))

    if cfg.strategy == "vanilla" and act_bits is not None:
        assign = exp.assignment(base, weight_bits, act_bits)
        params, log = finetune_vanilla(exp.net, base, assign, exp.train, cfg)
        return _finish(exp, params, assign, [log])

    p1_cache = {} if p1_cache is None else p1_cache
    if weight_bits not in p1_cache:
        if weight_bits is None:
            p1_cache[weight_bits] = (base, None)
        else:
            p1_cache[weight_bits] = finetune_p1(exp.net, base, weight_bits, exp.train, cfg)
    p1, p1_log = p1_cache[weight_bits]
    logs = [] if p1_log is None else [p1_log]
    assign = exp.assignment(p1, weight_bits, act_bits)
    if p1_log is not None and p1_log.diverged:
        return CellResult(p1, assign, NA, True, logs)
    if cfg.strategy in ("vanilla", "p1") or act_bits is None:
        return _finish(exp, p1, assign, logs)
    if cfg.strategy == "p2":
        p2_cfg = StrategyConfig(**{**asdict(cfg), "epochs": cfg.epochs * (len(exp.net) - 1)})
        params, log = finetune_p2(exp.net, p1, assign, exp.train, p2_cfg)
    else:
        plan = build_phase_plan(len(exp.net), cfg.epochs)
        params, log = finetune_p3(exp.net, p1, assign, exp.train, plan, cfg)
    return _finish(exp, params, assign, logs + [log])


def compare_strategies(exp: Experiment, weight_bits, act_bits, strategies=("none", "p1", "p2", "p3", "vanilla")) -> dict:
    """Top-k error of each strategy on one cell; P2 and P3 share one P1 run."""
    p1_cache, out = {}, {}
    for name in strategies:
        cfg = replace(exp.cfg, strategy=replace(exp.cfg.strategy, strategy=name))
        out[name] = run_cell(replace(exp, cfg=cfg), weight_bits, act_bits, p1_cache).error
    return out


def _finish(exp, params, assign, logs) -> CellResult:
    if any(l.diverged for l in logs):
        return CellResult(params, assign, NA, True, logs)
    return CellResult(params, assign, exp.error(params, assign), False, logs)


@dataclass
class GridReport:
    """Top-k error (%) keyed by (activation label, weight label)."""

    cells: dict
    weight_labels: list
    act_labels: list
    metadata: dict = field(default_factory=dict)

    def cell(self, act_bits, weight_bits):
        return self.cells[(bits_label(act_bits), bits_label(weight_bits))]

    @staticmethod
    def _fmt(v) -> str:
        return v if isinstance(v, str) else f"{v:.2f}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["activation_bits\\weight_bits"] + self.weight_labels)
        for a in self.act_labels:
            w.writerow([a] + [self._fmt(self.cells[(a, wl)]) for wl in self.weight_labels])
        return buf.getvalue()

    def to_json(self) -> str:
        body = {
            "metadata": self.metadata,
            "weight_bits": self.weight_labels,
            "activation_bits": self.act_labels,
            "error_percent": {a: {wl: self._fmt(self.cells[(a, wl)]) for wl in self.weight_labels} for a in self.act_labels},
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.csv").write_text(self.to_csv())
        (out / "grid.json").write_text(self.to_json())


def run_grid(cfg: RunConfig, exp: Experiment | None = None) -> GridReport:
    exp = prepare(cfg) if exp is None else exp
    cells, p1_cache = {}, {}
    for w in cfg.weight_bits:
        for a in cfg.act_bits:
            cells[(bits_label(a), bits_label(w))] = run_cell(exp, w, a, p1_cache).error
    s = exp.strategy_cfg()
    meta = {
        "strategy": s.strategy,
        "seed": cfg.seed,
        "dataset": exp.data.name,
        "epochs": s.epochs,
        "lr": s.lr,
        "top_k": cfg.top_k,
        "float_error": GridReport._fmt(exp.error(exp.float_params, PrecisionAssignment.float(len(exp.net)))),
    }
    return GridReport(cells, [bits_label(w) for w in cfg.weight_bits], [bits_label(a) for a in cfg.act_bits], meta)
