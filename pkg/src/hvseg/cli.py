"""Command-line interface: training, evaluation, uncertainty export, OOD
battery, parameter accounting, latent export, and toy dataset generation.

The config file is flat `key: value` text, e.g.::

    batch_size: 8
    learning_rate: 0.01
    epochs: 50
    beta: 0.1
    ce_weight: 0.4
    dice_weight: 0.6
    levels: 3
    encoder_channels: 16,32,64
    latent_channels: 2
    class_count: 2
    image_channels: 1
    input_size: 32,32
    output_size: 32,32
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from . import harness
from .data import ToySpec, load_cases, make_toy_dataset, write_cases
from .harness import TrainConfig
from .losses import LossConfig
from .network import ModelConfig


def parse_config_file(path) -> TrainConfig:
    raw = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ValueError(f"bad config line (expected 'key: value'): {line!r}")
        raw[key.strip()] = value.strip()

    def get(key, cast, default):
        return cast(raw[key]) if key in raw else default

    def int_list(s):
        return tuple(int(v) for v in s.split(","))

    model = ModelConfig(
        level_count=get("levels", int, 3),
        encoder_channels=get("encoder_channels", int_list, (32, 64, 128)),
        latent_channels=get("latent_channels", int, 2),
        class_count=get("class_count", int, 2),
        image_channels=get("image_channels", int, 1),
        input_size=get("input_size", int_list, (224, 224)),
        output_size=get("output_size", int_list, (512, 512)),
    )
    loss = LossConfig(
        beta=get("beta", float, 0.1),
        ce_weight=get("ce_weight", float, 0.4),
        dice_weight=get("dice_weight", float, 0.6),
    )
    return TrainConfig(
        batch_size=get("batch_size", int, 24),
        lr=get("learning_rate", float, 0.01),
        momentum=get("momentum", float, 0.9),
        weight_decay=get("weight_decay", float, 1e-4),
        epochs=get("epochs", int, 150),
        lr_decay=get("lr_decay", float, 1e-4),
        loss=loss,
        model=model,
        seed=get("seed", int, 0),
    )


def _load_single_case(case_dir):
    case_dir = Path(case_dir)
    cases = [c for c in load_cases(case_dir.parent) if c.case_id == case_dir.name]
    if not cases:
        raise FileNotFoundError(f"no case found at {case_dir}")
    return cases[0]


def _cmd_make_toy(args):
    spec = ToySpec(
        seed=args.seed,
        case_count=args.cases,
        image_size=args.size,
        ambiguity_rate=args.ambiguity,
    )
    cases = make_toy_dataset(spec)
    write_cases(cases, args.out)
    print(f"wrote {len(cases)} cases to {args.out}")


def _cmd_train(args):
    cfg = parse_config_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    dataset = list(load_cases(args.data, layout=args.layout))
    best, history = harness.train(cfg, dataset, args.out)
    last = history[-1] if history else {}
    print(f"best checkpoint: {best}")
    if "val_dice" in last:
        print(f"final val dice: {last['val_dice']:.4f}")


def _cmd_eval(args):
    dataset = list(load_cases(args.data, layout=args.layout))
    report = harness.evaluate(
        args.ckpt, dataset, mode=args.mode, n_samples=args.n, seed=args.seed
    )
    report.write(args.report)
    print(f"wrote report ({len(report.records)} records) to {args.report}")
    for key, agg in sorted(report.aggregates.items()):
        print(f"  {key}: mean={agg['mean']:.4f} var={agg['variance']:.6f}")


def _cmd_uncertainty(args):
    case = _load_single_case(args.case)
    umap = harness.export_uncertainty(args.ckpt, case, args.n, args.seed, args.out)
    print(f"wrote {args.out}.npy / .png (max raw variance position count: "
          f"{int((umap.values == 1.0).sum())})")


def _cmd_ood(args):
    case = _load_single_case(args.case)
    params = {
        "sigmas": [float(s) for s in args.sigma.split(",")] if args.sigma else (0.0, 1.0, 2.0, 4.0),
        "ratio": args.ratio,
        "n_samples": args.n,
    }
    if args.external:
        params["external_root"] = args.external
    report = harness.ood_battery(
        args.ckpt, case, args.kinds.split(","), params, args.seed, args.out
    )
    print(json.dumps(report, indent=2))


def _cmd_params(args):
    if args.config:
        target = parse_config_file(args.config).model
    else:
        target = args.ckpt
    total, table = harness.count_parameters(target)
    for module, count in sorted(table.items()):
        print(f"  {module}: {count}")
    print(f"total trainable parameters: {total}")


def _cmd_latents(args):
    case = _load_single_case(args.case)
    written = harness.export_latent_stats(args.ckpt, case, args.out)
    print(f"wrote {len(written)} latent stat images to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hvseg",
        description="Uncertainty-aware hierarchical segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate the synthetic benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--ambiguity", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_toy)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--layout", default="multi_annotator",
                   choices=["multi_annotator", "multi_class"])
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="prior", choices=["prior", "sample"])
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--layout", default="multi_annotator",
                   choices=["multi_annotator", "multi_class"])
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("uncertainty", help="export an uncertainty heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case", required=True, help="path to a case directory")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_uncertainty)

    p = sub.add_parser("ood", help="run the out-of-distribution battery")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case", required=True, help="path to a case directory")
    p.add_argument("--kinds", default="blur,patch")
    p.add_argument("--sigma", default=None, help="comma-separated blur sigmas")
    p.add_argument("--ratio", type=float, default=0.1)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--external", default=None,
                   help="dataset root with external abnormal cases")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ood)

    p = sub.add_parser("params", help="count trainable parameters")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config")
    group.add_argument("--ckpt")
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("latents", help="export per-level latent statistics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case", required=True, help="path to a case directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_latents)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
