"""Compare fine-tuning strategies on one (weight, activation) cell across seeds.

    python scripts/strategy_ordering.py --seeds 0 1 2 3 4 --weight-bits 4 --act-bits 4

Each seed trains its own float desk8 net (cached under --cache), then reports
top-1 error for no fine-tuning, P1, P2, P3 and vanilla fine-tuning.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from fxptune.harness.data import DatasetSpec, load_dataset
from fxptune.harness.grid import (
    Experiment,
    PretrainConfig,
    RunConfig,
    compare_strategies,
    parse_bits,
    pretrain_float,
)
from fxptune.harness.nets import build_network
from fxptune.strategies import StrategyConfig
from fxptune.tensornet import load_parameters, save_parameters

NAMES = ("none", "p1", "p2", "p3", "vanilla")


def float_net(cache: Path, net, data, seed: int):
    path = cache / f"desk8_seed{seed}.ckpt"
    if path.exists():
        return load_parameters(path)[0]
    params = pretrain_float(net, data, PretrainConfig(), seed)
    save_parameters(path, params, metadata={"seed": seed})
    return params


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--weight-bits", default="4")
    ap.add_argument("--act-bits", default="4")
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--epochs", type=int, default=1, help="epochs per phase (P3), per run (P1, vanilla)")
    ap.add_argument("--cache", default="runs/checkpoints")
    ap.add_argument("--out", default="runs/strategy_ordering.json")
    args = ap.parse_args()

    cache = Path(args.cache)
    cache.mkdir(parents=True, exist_ok=True)
    data = load_dataset(DatasetSpec())
    net = build_network({"preset": "desk8"}, data.input_shape, data.num_classes)
    w, a = parse_bits(args.weight_bits), parse_bits(args.act_bits)
    rows = {}
    for seed in args.seeds:
        cfg = RunConfig(strategy=StrategyConfig(strategy="none", lr=args.lr, epochs=args.epochs), seed=seed)
        exp = Experiment(cfg, data, net, float_net(cache, net, data, seed))
        rows[seed] = compare_strategies(exp, w, a, NAMES)
        print(f"seed {seed}: " + "  ".join(f"{k} {v if isinstance(v, str) else f'{v:.2f}'}" for k, v in rows[seed].items()),
              flush=True)

    medians = {k: float(np.median([np.inf if r[k] == "n/a" else r[k] for r in rows.values()])) for k in NAMES}
    print("median: " + "  ".join(f"{k} {v:.2f}" for k, v in medians.items()))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps({"per_seed": rows, "median": medians, "lr": args.lr,
                                          "weight_bits": args.weight_bits, "act_bits": args.act_bits},
                                         indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
