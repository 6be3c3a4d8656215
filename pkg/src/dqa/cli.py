"""Command-line entry point.

Subcommands: train, eval, export, plot, compare. Exit codes: 0 success,
2 configuration/validation problem, 3 training aborted on a non-finite
loss, 4 unreadable or corrupt checkpoint/model file.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .attention import effective_mixture_curve
from .autodiff import DimensionError, ValidationError
from .checkpoint import CheckpointError
from .config import (ConfigError, parse_config, parse_config_text,
                     serialize_config, with_overrides)
from .data import FormatError
from .layers import MODEL_MAGIC, export_hard, load_hard_model, save_hard_model
from .quantizers import DegenerateRangeError
from .svgplot import render_two_panel
from .train import (TrainAbort, build_datasets, compare_runs, evaluate,
                    format_float, load_run_checkpoint, read_metrics_csv,
                    run_experiment)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NAN = 3
EXIT_CHECKPOINT = 4

STAIRCASE_POINTS = 501


def _echo_invocation(args_namespace, command):
    flags = []
    for key, value in sorted(vars(args_namespace).items()):
        if key in ("func", "command") or value is None:
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(value, list):
            flags.append(f"{flag} {' '.join(str(v) for v in value)}")
        else:
            flags.append(f"{flag} {value}")
    print(f"invocation: dqa {command} {' '.join(flags)}")


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    cfg = with_overrides(cfg, method=args.method, seed=args.seed)
    out = Path(args.out) if args.out else (
        Path(cfg.out_dir) / f"{Path(args.config).stem}-{cfg.method}-s{cfg.seed}")
    _echo_invocation(args, "train")
    result = run_experiment(cfg, out)
    print(f"run written to {out}")
    for key in ("final_train_acc", "final_val_acc"):
        print(f"{key} = {result.summary[key]!r}")
    for key, value in result.summary.items():
        if key.endswith("_bits"):
            print(f"{key} = {value}")
    return EXIT_OK


def _is_hard_model(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(8) == MODEL_MAGIC


def _eval_hard(path, split):
    model = load_hard_model(path)
    if not model.config_text:
        raise ValidationError(f"{path}: artifact carries no config, cannot rebuild data")
    cfg = parse_config_text(model.config_text)
    train_ds, val_ds = build_datasets(cfg)
    ds = val_ds if split == "val" else train_ds
    logits = model.forward(ds.features)
    accuracy = float(np.mean(logits.argmax(axis=1) == ds.labels))
    return accuracy


def cmd_eval(args) -> int:
    _echo_invocation(args, "eval")
    if _is_hard_model(args.checkpoint):
        accuracy = _eval_hard(args.checkpoint, args.split)
        print(f"{args.split}_acc = {accuracy!r}")
        return EXIT_OK
    cfg, network, _, train_ds, val_ds, _, _ = load_run_checkpoint(args.checkpoint)
    ds = val_ds if args.split == "val" else train_ds
    accuracy, loss = evaluate(network, ds)
    print(f"{args.split}_acc = {accuracy!r}")
    print(f"{args.split}_loss = {loss!r}")
    return EXIT_OK


def cmd_export(args) -> int:
    _echo_invocation(args, "export")
    cfg, network, _, _, _, _, _ = load_run_checkpoint(args.checkpoint)
    model = export_hard(network, network.last_temperature,
                        config_text=serialize_config(cfg))
    save_hard_model(model, args.out)
    print(f"hard model written to {args.out}")
    for i, bits in enumerate(model.achieved_bits(), start=1):
        print(f"layer_{i}_bits = {'fp' if bits is None else bits}")
    return EXIT_OK


def _staircase_epochs(rows):
    epochs = sorted({r["epoch"] for r in rows})
    picks = {epochs[0], epochs[len(epochs) // 2], epochs[-1]}
    return sorted(picks)


def cmd_plot(args) -> int:
    _echo_invocation(args, "plot")
    metrics_path = Path(args.metrics)
    header, rows = read_metrics_csv(metrics_path)
    if not any(name.startswith("a_") for name in header):
        raise ValidationError(f"{metrics_path}: no attention columns "
                              f"(plot needs a dqa run)")
    layers = sorted({r["layer"] for r in rows})
    if args.layer not in layers:
        raise ValidationError(f"layer {args.layer} out of range (run has layers {layers})")
    config_path = Path(args.config) if args.config else metrics_path.with_name("effective.cfg")
    if not config_path.exists():
        raise ValidationError(f"{config_path}: config not found (pass --config to "
                              f"locate the quantizer list)")
    cfg = parse_config(config_path)
    layer_rows = [r for r in rows if r["layer"] == args.layer]
    k = len(layer_rows[0]["attention"])
    batches = [r["batch"] for r in layer_rows]
    attention_series = [(f"a_{i + 1}", batches, [r["attention"][i] for r in layer_rows])
                        for i in range(k)]

    sweep = np.linspace(-1.0, 1.0, STAIRCASE_POINTS)
    staircase_series = []
    by_epoch = {r["epoch"]: r for r in layer_rows}
    for epoch in _staircase_epochs(layer_rows):
        a = np.asarray(by_epoch[epoch]["attention"])
        curve = effective_mixture_curve(cfg.quantizers, a, sweep)
        staircase_series.append((f"epoch {epoch}", list(sweep), list(curve)))

    out_svg = Path(args.out)
    render_two_panel(
        out_svg,
        {"title": f"attention weights, layer {args.layer}", "x_label": "batch",
         "y_label": "attention", "y_range": (0.0, 1.05),
         "series": [(label, xs, ys) for label, xs, ys in attention_series]},
        {"title": f"effective quantization, layer {args.layer}", "x_label": "input",
         "y_label": "quantized", "series": staircase_series})

    companion = out_svg.with_suffix(".csv")
    with open(companion, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["section", "series", "x", "value"])
        for label, xs, ys in attention_series:
            for x, y in zip(xs, ys):
                writer.writerow(["attention", label, x, format_float(y)])
        for label, xs, ys in staircase_series:
            for x, y in zip(xs, ys):
                writer.writerow(["staircase", label, format_float(x), format_float(y)])
    print(f"plot written to {out_svg} (points in {companion})")
    return EXIT_OK


def cmd_compare(args) -> int:
    _echo_invocation(args, "compare")
    rows = compare_runs(args.configs, list(range(args.seeds)), args.out)
    print((Path(args.out) / "comparison.txt").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dqa",
        description="Quantization-aware training with an attention mixture of quantizers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--method", choices=("fp", "fixed", "dqa", "br"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or exported model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="export the hard-quantized model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="artifact file path")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("plot", help="attention trajectory and staircase figure")
    p.add_argument("--metrics", required=True, help="metrics CSV from a dqa run")
    p.add_argument("--out", required=True, help="output SVG path")
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--config", default=None,
                   help="config with the quantizer list (default: effective.cfg "
                        "next to the metrics file)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", help="run several configs over shared seeds")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationError, DimensionError, FormatError, DegenerateRangeError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        print(f"  temperature = {exc.temperature!r}", file=sys.stderr)
        print(f"  lr = {exc.lr!r}", file=sys.stderr)
        for layer, a in exc.attention.items():
            print(f"  layer {layer} attention = {np.array2string(a, precision=6)}",
                  file=sys.stderr)
        return EXIT_NAN
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
