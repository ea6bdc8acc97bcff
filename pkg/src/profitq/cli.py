"""Command-line harness.

Subcommands: train, eval, aiwq-profile, negpad-verify, cost-report. Run
artifacts (config snapshot, metrics.csv, stage logs, checkpoints) land under
$PROFITQ_RUN_DIR (default ./runs), one directory per run.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .aiwq import sample_aiwq
from .bops import bops_report, report_csv
from .checkpoint import load_checkpoint
from .config import load_config
from .data import Dataset, load_idx_dataset
from .negpad import H_SWISH_MIN, NegPadRewrite, verify_rewrite, zero_fraction
from .tensor import h_swish_raw
from .train import Trainer, evaluate_network, train

RUN_DIR_ENV = "PROFITQ_RUN_DIR"


def _run_root() -> str:
    return os.environ.get(RUN_DIR_ENV, "runs")


def _resolve_dataset(ckpt, split: str, args) -> Dataset:
    if args.images and args.labels:
        return load_idx_dataset(args.images, args.labels)
    from .train import _build_datasets
    train_ds, test_ds = _build_datasets(ckpt.run, ckpt.net.num_classes)
    return test_ds if split == "test" else train_ds


def _cmd_train(args) -> int:
    net_cfg, run_cfg = load_config(args.config)
    run_dir = args.run_dir or os.path.join(_run_root(), args.tag)
    _, summary = train(net_cfg, run_cfg, run_dir=run_dir, verbose=not args.quiet)
    print(f"run_dir: {run_dir}")
    print(f"epochs_run: {summary['epochs_run']}")
    print(f"test_top1: {summary['test_top1']:.4f}")
    print(f"test_top5: {summary['test_top5']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = _resolve_dataset(ckpt, args.split, args)
    net = ckpt.build_network()
    if args.ema:
        shadow = ckpt.ema_arrays()
        for name, arr in net.param_arrays().items():
            if name in shadow:
                arr[...] = shadow[name]
    top1, top5 = evaluate_network(net, ds)
    print(f"top1: {top1:.4f}")
    print(f"top5: {top5:.4f}")
    return 0


def _cmd_aiwq_profile(args) -> int:
    trainer = Trainer.resume(args.ckpt)
    if not trainer.network.quantized_convs():
        print("checkpoint has no quantized conv layers", file=sys.stderr)
        return 1
    report = trainer.sample_aiwq(args.iters)
    csv = report.to_csv()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(csv)
    print(csv, end="")
    return 0


def _cmd_negpad_verify(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    net = ckpt.build_network()
    rng = np.random.Generator(np.random.PCG64(args.seed))
    print("layer_id,max_abs_error,zero_fraction")
    shape_by_layer = _input_shapes(net, ckpt)
    for blk in net.conv_blocks:
        if not blk.fed_by_h_swish:
            continue
        rewrite = NegPadRewrite(shift_m=H_SWISH_MIN,
                                weight=blk.quantized_weight(),
                                stride=blk.stride, padding=blk.padding,
                                groups=blk.groups)
        err = verify_rewrite(rewrite, shape_by_layer[blk.layer_id],
                             trials=args.trials, rng=rng, quantizer=blk.input_q)
        acts = h_swish_raw(rng.normal(0.0, 2.0, size=shape_by_layer[blk.layer_id]))
        if blk.input_q is not None:
            acts = blk.input_q.apply(acts)
        zf = zero_fraction(acts, H_SWISH_MIN)
        print(f"{blk.layer_id},{err:.3e},{zf:.4f}")
    return 0


def _input_shapes(net, ckpt) -> dict[str, tuple[int, ...]]:
    x = np.zeros((2, *ckpt.net.input_shape))
    captured = net.capture_inputs(x)
    return {lid: arr.shape for lid, arr in captured.items()}


def _cmd_cost_report(args) -> int:
    net_cfg, _ = load_config(args.config)
    try:
        act_bits, weight_bits = (int(v) for v in args.bits.split(","))
    except ValueError:
        print("--bits expects 'A,W' (activation,weight)", file=sys.stderr)
        return 2
    rows = bops_report(net_cfg, weight_bits=weight_bits, act_bits=act_bits,
                       first_layer_act_bits=args.first_layer_act_bits)
    print(report_csv(rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="profitq",
                                description="Quantization-aware training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a full training pipeline")
    t.add_argument("--config", required=True)
    t.add_argument("--run-dir", default=None)
    t.add_argument("--tag", default="run")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--ema", action="store_true", help="use EMA shadows")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--images", default=None, help="IDX image file")
    e.add_argument("--labels", default=None, help="IDX label file")
    e.set_defaults(fn=_cmd_eval)

    a = sub.add_parser("aiwq-profile", help="profile per-layer instability")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--iters", type=int, default=16)
    a.add_argument("--out", default=None)
    a.set_defaults(fn=_cmd_aiwq_profile)

    n = sub.add_parser("negpad-verify", help="verify the negative-padding rewrite")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--trials", type=int, default=20)
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(fn=_cmd_negpad_verify)

    c = sub.add_parser("cost-report", help="BOPS and model-size table")
    c.add_argument("--config", required=True)
    c.add_argument("--bits", required=True, help="activation,weight e.g. 4,4")
    c.add_argument("--first-layer-act-bits", type=int, default=None)
    c.set_defaults(fn=_cmd_cost_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
