"""Weight x activation bit-width grid for one or more strategies.

    python scripts/bitwidth_grid.py --config configs/desk8_grid.json --strategies none p1 p3

Writes <out>/<strategy>/grid.csv and grid.json; all strategies share the
float checkpoint named in the config (trained on first use).
"""
import argparse
from dataclasses import replace
from pathlib import Path

from fxptune.harness.grid import RunConfig, prepare, run_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/desk8_grid.json")
    ap.add_argument("--strategies", nargs="+", default=["none", "vanilla", "p1", "p2", "p3"])
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = RunConfig.load(args.config)
    out = Path(args.out or cfg.output_dir)
    exp = prepare(cfg)
    for name in args.strategies:
        run_cfg = replace(cfg, strategy=replace(cfg.strategy, strategy=name))
        report = run_grid(run_cfg, replace(exp, cfg=run_cfg))
        report.write(out / name)
        print(f"== {name}")
        print(report.to_csv(), end="", flush=True)


if __name__ == "__main__":
    main()
