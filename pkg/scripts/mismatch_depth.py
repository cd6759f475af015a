"""Per-layer gradient mismatch of a trained desk8 net at several activation widths.

    python scripts/mismatch_depth.py --checkpoint runs/checkpoints/desk8_seed0.ckpt --batches 50

Writes mismatch_A{bits}.csv / .json per width, and prints relative error,
cosine and the norm ratio |G_q| / |G_f| for each layer.
"""
import argparse
from pathlib import Path

import numpy as np

from fxptune.diagnostics import mismatch_per_layer
from fxptune.harness.data import DatasetSpec, load_dataset
from fxptune.harness.grid import PretrainConfig, parse_bits, pretrain_float
from fxptune.harness.nets import build_network
from fxptune.qforward import forward_quantized, grid_assignment
from fxptune.tensornet import backward_presumed, forward_float, load_parameters, save_parameters


def norm_ratio(net, params, assign, batches):
    ratios = np.zeros(len(net))
    for x, y in batches:
        gq = backward_presumed(net, forward_quantized(net, params, assign, x, y)).weights
        gf = backward_presumed(net, forward_float(net, params, x, y)).weights
        ratios += [np.linalg.norm(q) / max(np.linalg.norm(f), 1e-300) for q, f in zip(gq, gf)]
    return ratios / len(batches)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", default="runs/checkpoints/desk8_seed0.ckpt")
    ap.add_argument("--act-bits", nargs="+", default=["4", "8", "16"])
    ap.add_argument("--weight-bits", default="float")
    ap.add_argument("--batches", type=int, default=50)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--out", default="runs/mismatch")
    args = ap.parse_args()

    data = load_dataset(DatasetSpec())
    net = build_network({"preset": "desk8"}, data.input_shape, data.num_classes)
    ckpt = Path(args.checkpoint)
    if ckpt.exists():
        params = load_parameters(ckpt)[0]
    else:
        params = pretrain_float(net, data, PretrainConfig(), 0)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_parameters(ckpt, params)
    bs = args.batch_size
    batches = [(data.val_x[i * bs : (i + 1) * bs], data.val_y[i * bs : (i + 1) * bs]) for i in range(args.batches)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for bits in args.act_bits:
        assign = grid_assignment(net, params, data.train_x[:256], parse_bits(args.weight_bits), parse_bits(bits))
        report = mismatch_per_layer(net, params, assign, batches)
        (out / f"mismatch_A{bits}.csv").write_text(report.to_csv())
        (out / f"mismatch_A{bits}.json").write_text(report.to_json())
        ratio = norm_ratio(net, params, assign, batches)
        print(f"A{bits}: depth spearman {report.depth_spearman():.3f}")
        print("  layer  rel_err  cosine  |Gq|/|Gf|")
        for layer, r in zip(report.layers, ratio):
            print(f"  {layer.layer:5d}  {layer.rel_err_mean:7.3f}  {layer.cosine_mean:6.3f}  {r:9.3f}")


if __name__ == "__main__":
    main()
