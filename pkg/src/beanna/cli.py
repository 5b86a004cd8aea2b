"""``beanna`` command line: train, simulate, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .mnist import IdxError, find_mnist_dir, load_mnist, load_split
from .network import DimensionError, NetworkSpec, run_inference
from .perf import PerfReport
from .weightfile import WeightFileError

log = logging.getLogger("beanna")

# hybrid-over-float reference ratios: rate gain, memory and energy reductions
REFERENCE_RATIOS = {"rate": 2.94, "memory": 3.08, "energy": 2.92}


class UsageError(Exception):
    pass


def _dataset(cfg: RunConfig, train: bool):
    keys = ("train_images", "train_labels") if train else ("test_images", "test_labels")
    paths = [cfg.path(k) for k in keys]
    if all(p is None for p in paths):
        found = find_mnist_dir([cfg.base_dir / "data" / "mnist"])
        if found is None:
            raise UsageError(
                f"no {'train' if train else 'test'} data: set paths.{keys[0]}/{keys[1]} "
                "or BEANNA_MNIST_DIR"
            )
        return load_split(found, train)
    for key, p in zip(keys, paths):
        if p is None:
            raise UsageError(f"paths.{key} is not set")
        if not p.exists():
            raise UsageError(f"{key} file not found: {p}")
    return load_mnist(*paths)


def cmd_train(args) -> int:
    from . import trainer
    from .plotting import accuracy_curve

    cfg = RunConfig.load(args.config)
    tc = cfg.train
    if list(tc.layers) != list(cfg.network["layers"]) or list(tc.precision) != list(cfg.network["precision"]):
        raise UsageError("train.layers/precision disagree with network")
    NetworkSpec.from_dims(tc.layers, tc.precision)  # validate shape rules early
    train_set = _dataset(cfg, train=True)
    test_set = _dataset(cfg, train=False)
    result = trainer.train(tc, train_set, test_set)

    weights = cfg.path("weights") or Path("weights.bean")
    curve_csv = cfg.path("curve_csv") or weights.with_suffix(".csv")
    weights.parent.mkdir(parents=True, exist_ok=True)
    weights.write_bytes(trainer.export_weights(result.shadow))
    with open(curve_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "test_accuracy"])
        for epoch, loss, acc in result.curve:
            w.writerow([epoch, f"{loss:.6f}", f"{acc:.6f}"])
    fig_dir = cfg.path("figures_dir") or curve_csv.parent
    fig_dir.mkdir(parents=True, exist_ok=True)
    accuracy_curve(result.curve, fig_dir / (curve_csv.stem + ".png"))
    print(f"final test accuracy {result.accuracy:.4f}; weights -> {weights}; curve -> {curve_csv}")
    return 0


def cmd_simulate(args) -> int:
    from .weightfile import load

    cfg = RunConfig.load(args.config)
    net = load(args.weights)
    if net.spec.dims != list(cfg.network["layers"]) or [
        l.precision.value for l in net.spec.layers
    ] != list(cfg.network["precision"]):
        raise UsageError(
            f"weight file network {net.spec.dims} "
            f"{[l.precision.value for l in net.spec.layers]} does not match config "
            f"{cfg.network['layers']} {cfg.network['precision']}"
        )
    batch = args.batch or cfg.batch_size
    if batch < 1:
        raise UsageError("batch must be at least 1")
    labels = None
    try:
        test = _dataset(cfg, train=False)
        inputs, labels = test.images[:batch], test.labels[:batch]
        if len(inputs) < batch:
            raise UsageError(f"test set has only {len(inputs)} samples")
    except UsageError as exc:
        if args.require_data:
            raise
        log.warning("%s; using seeded random inputs", exc)
        inputs = np.random.default_rng(args.seed).uniform(0, 1, (batch, net.spec.layers[0].in_dim))

    result = run_inference(net, inputs, args.mode, cfg.sim, cfg.energy)
    report = result.report
    if labels is not None:
        report.accuracy = float(np.mean(result.predictions == labels))
    text = report.to_json()
    out = Path(args.out) if args.out else cfg.path("report")
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    else:
        print(text)
    preds = cfg.path("predictions")
    if preds:
        with open(preds, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "prediction"] + (["label"] if labels is not None else []))
            for i, p in enumerate(result.predictions):
                w.writerow([i, int(p)] + ([int(labels[i])] if labels is not None else []))
    print(
        f"{report.variant} batch {batch} ({report.mode}): "
        f"{report.inferences_per_second:.2f} inf/s, {report.total_cycles} cycles",
        file=sys.stderr,
    )
    return 0


def _load_report(path) -> PerfReport:
    try:
        return PerfReport.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise UsageError(f"report not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON: {exc}") from None
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"{path}: not a report: {exc}") from None


def compare_reports(a: PerfReport, b: PerfReport) -> list:
    """``(metric, a, b, ratio, reference)`` rows; ratios are b's gain over a."""
    return [
        ("rate (inf/s)", a.inferences_per_second, b.inferences_per_second,
         b.inferences_per_second / a.inferences_per_second, REFERENCE_RATIOS["rate"]),
        ("memory (bytes)", a.memory_bytes, b.memory_bytes,
         a.memory_bytes / b.memory_bytes, REFERENCE_RATIOS["memory"]),
        ("energy (mJ/inf)", a.energy_per_inference_j * 1e3, b.energy_per_inference_j * 1e3,
         a.energy_per_inference_j / b.energy_per_inference_j, REFERENCE_RATIOS["energy"]),
    ]


def cmd_report(args) -> int:
    from .plotting import comparison_chart

    a, b = _load_report(args.a), _load_report(args.b)
    rows = compare_reports(a, b)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"{'metric':<18}{a.variant:>14}{b.variant:>14}{'ratio':>9}{'ref':>7}")
    for metric, va, vb, ratio, ref in rows:
        print(f"{metric:<18}{va:>14.6g}{vb:>14.6g}{ratio:>9.3f}{ref:>7.2f}")
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", f"a_{a.variant}", f"b_{b.variant}", "ratio", "reference_ratio"])
        for metric, va, vb, ratio, ref in rows:
            w.writerow([metric, f"{va:.6g}", f"{vb:.6g}", f"{ratio:.4f}", ref])
    comparison_chart(rows, out_dir / "comparison.png", labels=(a.variant, b.variant))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beanna", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network and export its weight file")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="run inference on the modelled device")
    s.add_argument("config")
    s.add_argument("--weights", required=True)
    s.add_argument("--batch", type=int)
    s.add_argument("--mode", choices=("cycle", "functional"), default="cycle")
    s.add_argument("--out", help="report JSON path (default: paths.report or stdout)")
    s.add_argument("--seed", type=int, default=0, help="seed for random inputs when no test data")
    s.add_argument("--require-data", action="store_true", help="fail instead of using random inputs")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="compare two simulation reports")
    r.add_argument("a")
    r.add_argument("b")
    r.add_argument("--out-dir", default=".")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, IdxError, WeightFileError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
