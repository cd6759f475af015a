"""Command-line entry point: ``fxptune <subcommand> --config run.json``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .diagnostics import descent_check, mismatch_per_layer
from .fixedpoint import AccumulatorOverflow, InvalidNumericInput
from .harness.data import IDXFormatError
from .harness.grid import RunConfig, bits_label, parse_bits, prepare, run_cell, run_grid
from .tensornet import load_parameters, save_parameters


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if cfg.checkpoint is None:
        cfg.checkpoint = str(Path(cfg.output_dir) / "float.ckpt")
    strategy = getattr(args, "strategy", None)
    if strategy is not None:
        cfg.strategy = replace(cfg.strategy, strategy=strategy)
    return cfg


def _bits(args, cfg):
    w = parse_bits(args.weight_bits) if args.weight_bits is not None else cfg.weight_bits[0]
    a = parse_bits(args.act_bits) if args.act_bits is not None else cfg.act_bits[0]
    return w, a


def _write_json(path: Path, body: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _fmt(err) -> str:
    return err if isinstance(err, str) else f"{err:.2f}"


def cmd_train_float(args, cfg: RunConfig) -> None:
    if Path(cfg.checkpoint).exists() and not args.force:
        print(f"checkpoint {cfg.checkpoint} exists; use --force to retrain")
    elif args.force:
        Path(cfg.checkpoint).unlink(missing_ok=True)
    exp = prepare(cfg)
    cell = run_cell(exp, None, None)
    _write_json(Path(cfg.output_dir) / "train_float.json", {"checkpoint": cfg.checkpoint, "error_percent": _fmt(cell.error)})
    print(f"float top-{cfg.top_k} error {_fmt(cell.error)}%  -> {cfg.checkpoint}")


def cmd_quantize(args, cfg: RunConfig) -> None:
    cfg.strategy = replace(cfg.strategy, strategy="none")
    w, a = _bits(args, cfg)
    exp = prepare(cfg)
    cell = run_cell(exp, w, a)
    body = {"weight_bits": bits_label(w), "activation_bits": bits_label(a), "error_percent": _fmt(cell.error),
            "assignment": cell.assign.describe()}
    _write_json(Path(cfg.output_dir) / "quantize.json", body)
    print(f"W{bits_label(w)}/A{bits_label(a)} no fine-tune: {_fmt(cell.error)}%")


def cmd_finetune(args, cfg: RunConfig) -> None:
    w, a = _bits(args, cfg)
    exp = prepare(cfg)
    cell = run_cell(exp, w, a)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{cfg.strategy.strategy}_W{bits_label(w)}_A{bits_label(a)}"
    for i, log in enumerate(cell.logs):
        (out / f"{tag}_log{i}.csv").write_text(log.to_csv())
    if not cell.diverged:
        save_parameters(out / f"{tag}.ckpt", cell.params, metadata={"strategy": cfg.strategy.strategy,
                                                                     "weight_bits": bits_label(w),
                                                                     "activation_bits": bits_label(a)})
    body = {"strategy": cfg.strategy.strategy, "weight_bits": bits_label(w), "activation_bits": bits_label(a),
            "error_percent": _fmt(cell.error), "diverged": cell.diverged,
            "reason": next((l.reason for l in cell.logs if l.diverged), "")}
    _write_json(out / f"{tag}.json", body)
    print(f"{tag}: {_fmt(cell.error)}%")


def cmd_eval(args, cfg: RunConfig) -> None:
    w, a = _bits(args, cfg)
    exp = prepare(cfg)
    params = exp.float_params
    if args.params:
        params, _ = load_parameters(args.params)
        params.check(exp.net)
    assign = exp.assignment(params, w, a)
    err = exp.error(params, assign)
    _write_json(Path(cfg.output_dir) / "eval.json",
                {"params": args.params or cfg.checkpoint, "weight_bits": bits_label(w),
                 "activation_bits": bits_label(a), "error_percent": _fmt(err)})
    print(f"W{bits_label(w)}/A{bits_label(a)}: {_fmt(err)}%")


def cmd_diagnose(args, cfg: RunConfig) -> None:
    w, a = _bits(args, cfg)
    exp = prepare(cfg)
    assign = exp.assignment(exp.float_params, w, a)
    x, y = exp.val
    bs = args.batch_size
    n = min(args.batches, len(x) // bs)
    batches = [(x[i * bs : (i + 1) * bs], y[i * bs : (i + 1) * bs]) for i in range(n)]
    report = mismatch_per_layer(exp.net, exp.float_params, assign, batches)
    descent = descent_check(exp.net, exp.float_params, assign, batches[0])
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mismatch.csv").write_text(report.to_csv())
    body = json.loads(report.to_json())
    body["descent"] = asdict(descent)
    _write_json(out / "mismatch.json", body)
    print(report.to_csv(), end="")
    print(f"depth spearman {report.depth_spearman():.3f}; descent slope {descent.slope:.4g} ({descent.flag})")


def cmd_grid(args, cfg: RunConfig) -> None:
    report = run_grid(cfg)
    report.write(cfg.output_dir)
    print(report.to_csv(), end="")


COMMANDS = {
    "train-float": cmd_train_float,
    "quantize": cmd_quantize,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "grid": cmd_grid,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fxptune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides the config)")
        if name in ("quantize", "finetune", "eval", "diagnose"):
            p.add_argument("--weight-bits", help="4, 8, 16 or float (default: first grid entry)")
            p.add_argument("--act-bits", help="4, 8, 16 or float (default: first grid entry)")
        if name == "finetune":
            p.add_argument("--strategy", choices=("vanilla", "p1", "p2", "p3"), required=True)
        if name == "train-float":
            p.add_argument("--force", action="store_true", help="retrain even if the checkpoint exists")
        if name == "eval":
            p.add_argument("--params", help="checkpoint to evaluate (default: the float checkpoint)")
        if name == "diagnose":
            p.add_argument("--batches", type=int, default=50)
            p.add_argument("--batch-size", type=int, default=64)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, TypeError, json.JSONDecodeError, IDXFormatError) as e:
        if isinstance(e, (InvalidNumericInput, AccumulatorOverflow)):
            raise
        print(f"fxptune: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
