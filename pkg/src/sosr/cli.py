"""Command-line entry points.

Exit codes: 0 success, 2 config error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import parse_config, parse_data_recipe
from .data import make_long_tailed, load_cifar_binary, save_cifar_binary
from .errors import ConfigError, NumericError
from .harness import (
    census_overconfident,
    export_features_2d,
    read_metrics,
    sweep,
    train_run,
    write_metrics,
    write_sweep_csv,
)
from .nn import load_checkpoint, save_checkpoint


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad numeric list {text!r}: {exc}") from exc


def _render_run_figures(csv_path: Path, out_dir: Path) -> None:
    from . import figures

    _, rows = read_metrics(csv_path)
    if rows:
        figures.render_training_curves(rows, out_dir / "curves.png")
        figures.render_census_curves(rows, out_dir / "census.png")


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out_dir = Path(args.out or cfg.out_dir or f"runs/{Path(args.config).stem}")
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    try:
        model, metrics = train_run(cfg, seed)
    except NumericError as exc:
        write_metrics(exc.metrics, csv_path, cfg.census_thresholds)
        _render_run_figures(csv_path, out_dir)
        print(f"error: {exc}", file=sys.stderr)
        print(f"wrote {len(exc.metrics)} completed epochs to {csv_path}", file=sys.stderr)
        return 3
    write_metrics(metrics, csv_path, cfg.census_thresholds)
    save_checkpoint(model, out_dir / "model.ckpt")
    _render_run_figures(csv_path, out_dir)
    last = metrics[-1]
    print(f"seed {seed}: train_acc={last.train_acc:.4f} val_acc={last.val_acc:.4f}")
    print(f"outputs in {out_dir}")
    return 0


def cmd_census(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = parse_data_recipe(args.data)
    thresholds = _parse_floats(args.thresholds)
    counts = census_overconfident(model, dataset, thresholds)
    print("threshold,count")
    for t, c in zip(thresholds, counts):
        print(f"{t},{c}")
    return 0


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    values = _parse_floats(args.values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    try:
        rows = sweep(cfg, args.axis, values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out_dir = Path(args.out or cfg.out_dir or f"runs/{Path(args.config).stem}_sweep")
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"sweep_{args.axis}.csv"
    write_sweep_csv(rows, csv_path, args.axis)
    from . import figures

    axis_label = "threshold P" if args.axis == "p" else "weight beta"
    figures.render_sweep(rows, out_dir / f"sweep_{args.axis}.png", axis_label)
    print(f"{args.axis},mean_val_acc,std_val_acc")
    for row in rows:
        print(f"{row.value},{row.mean_val_acc:.4f},{row.std_val_acc:.4f}")
    print(f"outputs in {out_dir}")
    return 0


def cmd_make_imbalanced(args) -> int:
    if args.rho < 1.0:
        raise ConfigError(f"--rho must be >= 1, got {args.rho}")
    dataset = load_cifar_binary(args.in_path, layout=args.layout)
    reduced, profile = make_long_tailed(dataset, args.rho, args.seed)
    save_cifar_binary(reduced, args.out, layout=args.layout)
    counts = profile.per_class_counts
    print(f"wrote {len(reduced)} samples over {dataset.num_classes} classes to {args.out}")
    print(f"rho={profile.rho}: counts {counts[0]} (largest) .. {counts[-1]} (smallest)")
    return 0


def cmd_export_features(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = parse_data_recipe(args.data)
    try:
        svg_path = export_features_2d(model, dataset, args.out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"wrote {args.out} and {svg_path}")
    return 0


def cmd_report(args) -> int:
    csv_path = Path(args.metrics)
    out_dir = Path(args.out or csv_path.parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    _render_run_figures(csv_path, out_dir)
    print(f"figures in {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sosr",
        description="Train and probe classifiers with selective output smoothing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config's first seed")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("census", help="count confidently-correct samples per threshold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="data recipe, e.g. blobs:classes=10,seed=0")
    p.add_argument("--thresholds", default="0.7,0.9,0.99")
    p.set_defaults(fn=cmd_census)

    p = sub.add_parser("sweep", help="sweep the smoothing threshold or weight")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=("p", "beta"))
    p.add_argument("--values", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("make-imbalanced", help="write a long-tailed copy of a binary dataset")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layout", default="cifar100", choices=("cifar10", "cifar100"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_imbalanced)

    p = sub.add_parser("export-features", help="dump 2-D penultimate features as CSV + SVG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path; the SVG lands next to it")
    p.set_defaults(fn=cmd_export_features)

    p = sub.add_parser("report", help="re-render figures from an existing metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        # bad paths, malformed binary files, unreadable checkpoints
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
