"""Command-line surface tying the pipeline together.

Subcommands: make-data, train-float, calibrate, qat, lower, infer, eval,
gradcheck, analyze. Every failure exits nonzero with a single-line
`error: ...` message on stderr. Report commands write delimited CSV data
plus rendered figure files next to it.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import checks, containers, data, engine, plots
from .calibrate import calibrate_model, collect_stats
from .layers import Activation, Model, build_model, desk_cnn_specs, tiny_cnn_specs
from .quant import SUPPORTED_BITS
from .training import History, TrainConfig, evaluate, qat_train, train_float

ENV_SEED = "ADAQUANT_SEED"

ARCHS = {"desk": desk_cnn_specs, "tiny": tiny_cnn_specs}


def _default_seed() -> int:
    return int(os.environ.get(ENV_SEED, "0"))


def _write_metrics(history: History, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "eval_accuracy"])
        for i in range(len(history.epochs)):
            w.writerow(
                [
                    history.epochs[i],
                    repr(history.lr[i]),
                    repr(history.train_loss[i]),
                    repr(history.eval_accuracy[i]),
                ]
            )
    with open(os.path.join(out_dir, "qparams.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "name", "value"])
        for i, snap in enumerate(history.qparams):
            for name in sorted(snap):
                w.writerow([history.epochs[i], name, repr(snap[name])])
    plots.render_training_curves(history, os.path.join(out_dir, "training_curves.png"))
    plots.render_qparam_trajectories(history, os.path.join(out_dir, "qparams.png"))


def _load_data(path: str):
    images, labels, arity = containers.load_dataset(path)
    return images, labels, arity


def _train_config(args, shift_enabled: bool = True) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        weight_decay=args.weight_decay,
        momentum=args.momentum,
        batch_size=args.batch_size,
        shift_enabled=shift_enabled,
        seed=args.seed,
        qparam_lr_scaled=not getattr(args, "paper_literal_lr", False),
    )


def _add_train_flags(p: argparse.ArgumentParser, epochs: int) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--metrics-dir", default=None, help="write metrics CSVs and figures here")


def cmd_make_data(args) -> int:
    images, labels = data.make_dataset(args.count, args.seed)
    containers.save_dataset(args.out, images, labels, data.NUM_CLASSES)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_train_float(args) -> int:
    tx, ty, arity = _load_data(args.data)
    ex, ey, _ = _load_data(args.eval_data)
    specs = ARCHS[args.arch](Activation(args.activation, args.alpha))
    model = build_model(specs, tuple(tx.shape[1:]), args.seed)
    config = _train_config(args)
    history = train_float(model, tx, ty, ex, ey, config)
    containers.save_model(args.out, model, "float", meta={"arch": args.arch})
    if args.metrics_dir:
        _write_metrics(history, args.metrics_dir)
    acc = history.eval_accuracy[-1] if history.eval_accuracy else float("nan")
    print(f"float model saved to {args.out}; eval accuracy {acc:.4f}")
    return 0


def cmd_calibrate(args) -> int:
    c = containers.load_container(args.model)
    if c.stage != "float":
        raise containers.ContainerError(f"calibrate expects a float-stage container, got {c.stage}")
    model = containers.model_from_container(c)
    x, _, _ = _load_data(args.data)
    nb = max(1, args.calib_batches)
    batches = [x[i * args.batch_size : (i + 1) * args.batch_size] for i in range(nb)]
    batches = [b for b in batches if len(b)]
    calibrate_model(
        model,
        batches,
        bits=args.bits,
        first_last_bits=args.first_last_bits,
        shift_enabled=not args.no_shift,
        method=args.method,
    )
    containers.save_model(args.out, model, "qat", meta=c.header.get("meta", {}))
    print(f"calibrated ({args.method}, {args.bits}-bit) -> {args.out}")
    return 0


def cmd_qat(args) -> int:
    c = containers.load_container(args.model)
    if c.stage != "qat":
        raise containers.ContainerError(f"qat expects a qat-stage container, got {c.stage}")
    model = containers.model_from_container(c)
    tx, ty, _ = _load_data(args.data)
    ex, ey, _ = _load_data(args.eval_data)
    config = _train_config(args, shift_enabled=model.shift_enabled)
    history = qat_train(model, tx, ty, ex, ey, config)
    containers.save_model(args.out, model, "qat", meta=c.header.get("meta", {}))
    if args.metrics_dir:
        _write_metrics(history, args.metrics_dir)
    acc = history.eval_accuracy[-1] if history.eval_accuracy else float("nan")
    print(f"qat model saved to {args.out}; eval accuracy {acc:.4f}")
    return 0


def cmd_lower(args) -> int:
    c = containers.load_container(args.model)
    if c.stage != "qat":
        raise containers.ContainerError(f"lower expects a qat-stage container, got {c.stage}")
    model = containers.model_from_container(c)
    lowered, report = engine.lower_model(model)
    containers.save_lowered_model(args.out, lowered, report, meta=c.header.get("meta", {}))
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"lowered model saved to {args.out} ({len(lowered.layers)} layers)")
    return 0


def _forward_for_engine(args, x: np.ndarray) -> np.ndarray:
    c = containers.load_container(args.model)
    if args.engine == "integer":
        lm = containers.lowered_from_container(c)
        return lm.forward(x)
    model = containers.model_from_container(c)
    from .autodiff import Tensor

    with Tensor.no_grad():
        if args.engine == "fake-quant":
            if c.stage != "qat":
                raise containers.ContainerError("fake-quant engine needs a qat-stage container")
            return model.forward_qat(x).data
        return model.forward_float(x).data


def cmd_eval(args) -> int:
    x, y, _ = _load_data(args.data)
    correct = 0
    for start in range(0, len(x), args.batch_size):
        out = _forward_for_engine(args, x[start : start + args.batch_size])
        correct += int((out.argmax(axis=1) == y[start : start + args.batch_size]).sum())
    acc = correct / len(y)
    print(f"accuracy: {acc:.6f}")
    return 0


def cmd_infer(args) -> int:
    x, _, _ = _load_data(args.data)
    rows = []
    for start in range(0, len(x), args.batch_size):
        out = _forward_for_engine(args, x[start : start + args.batch_size])
        rows.extend(out.tolist())
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample"] + [f"out{i}" for i in range(len(rows[0]))])
        for i, row in enumerate(rows):
            w.writerow([i] + [repr(float(v)) for v in row])
    print(f"wrote {len(rows)} output rows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = checks.run_all(seed=args.seed)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        raise RuntimeError(f"{failed} gradcheck suite(s) failed")
    return 0


def cmd_analyze(args) -> int:
    c = containers.load_container(args.model)
    if c.stage not in ("float", "qat"):
        raise containers.ContainerError("analyze needs a float- or qat-stage container")
    model = containers.model_from_container(c)
    x, _, _ = _load_data(args.data)
    nb = max(1, args.batches)
    batch_list = [x[i * args.batch_size : (i + 1) * args.batch_size] for i in range(nb)]
    batch_list = [b for b in batch_list if len(b)]
    stats = collect_stats(model, batch_list)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "histograms.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "bin", "left", "right", "count"])
        for key in stats:
            st = stats[key]
            if st.max > st.min:
                edges = np.linspace(st.min, st.max, st.histogram.size + 1)
            else:
                edges = np.full(st.histogram.size + 1, st.min)
            for b in range(st.histogram.size):
                w.writerow([key, b, repr(float(edges[b])), repr(float(edges[b + 1])), int(st.histogram[b])])
    plots.render_histograms(stats, os.path.join(args.out_dir, "histograms.png"))
    print(f"wrote histograms for {len(stats)} activations to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaquant", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="generate the bundled synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=2560)
    s.add_argument("--seed", type=int, default=_default_seed())
    s.set_defaults(fn=cmd_make_data)

    s = sub.add_parser("train-float", help="baseline float training")
    s.add_argument("--data", required=True)
    s.add_argument("--eval-data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--arch", choices=sorted(ARCHS), default="desk")
    s.add_argument("--activation", choices=["identity", "relu", "leaky_relu", "swish"], default="leaky_relu")
    s.add_argument("--alpha", type=float, default=0.1)
    _add_train_flags(s, epochs=20)
    s.set_defaults(fn=cmd_train_float)

    s = sub.add_parser("calibrate", help="initialize quantization params from statistics")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bits", type=int, choices=SUPPORTED_BITS, default=4)
    s.add_argument("--first-last-bits", type=int, choices=SUPPORTED_BITS, default=8)
    s.add_argument("--no-shift", action="store_true", help="pin zero-points to 0 (scale-only)")
    s.add_argument("--method", choices=["minmax", "sqnr"], default="minmax")
    s.add_argument("--calib-batches", type=int, default=4)
    s.add_argument("--batch-size", type=int, default=64)
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("qat", help="quantization-aware retraining")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--eval-data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument(
        "--paper-literal-lr",
        action="store_true",
        help="use the unscaled plain-sum gradients for quantization params",
    )
    _add_train_flags(s, epochs=30)
    s.set_defaults(fn=cmd_qat)

    s = sub.add_parser("lower", help="freeze a qat model to integer-only form")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report", default=None, help="write the lowering report JSON here")
    s.set_defaults(fn=cmd_lower)

    for name, fn in (("eval", cmd_eval), ("infer", cmd_infer)):
        s = sub.add_parser(name, help=f"{name} a container on a dataset")
        s.add_argument("--model", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--engine", choices=["float", "fake-quant", "integer"], default="float")
        s.add_argument("--batch-size", type=int, default=256)
        if name == "infer":
            s.add_argument("--out", required=True)
        s.set_defaults(fn=fn)

    s = sub.add_parser("gradcheck", help="run the gradient oracle and finite-difference suites")
    s.add_argument("--seed", type=int, default=_default_seed())
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("analyze", help="emit per-layer activation histograms")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--batches", type=int, default=4)
    s.add_argument("--batch-size", type=int, default=64)
    s.set_defaults(fn=cmd_analyze)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # single-line machine-parseable failure
        msg = str(e).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
