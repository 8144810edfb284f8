"""Command-line entry point.

Subcommands mirror the workflow: generate traces, prepare a dataset, train
variants, evaluate/benchmark them, explain single predictions, serve a
stream. Exit codes: 0 success, 1 usage error, 2 data/domain error,
3 internal error. Each artifact-producing run writes a manifest recording
the exact invocation and the master seed, so reruns are reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import QoecastError
from .evaluation import (
    benchmark_latency,
    evaluate,
    evaluate_baseline,
    export_error_density,
    latency_budget,
    rank_variants,
    write_metrics_csv,
)
from .explain import attention_map, integrated_gradients, lime_local
from .pipeline import build_dataset, load_dataset, save_dataset
from .seeding import derive_seed
from .serve import FeedbackPolicy, run_stream
from .synthgen import GeneratorConfig, generate_trace
from .telemetry import load_trace, write_trace
from .train import TrainConfig, run_all_variants, train_variant
from .zoo import ALL_VARIANTS, load_bundle, save_bundle


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting itself."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_manifest(out_dir: Path, command: str, args_ns: argparse.Namespace,
                    seed: int | None, artifacts: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "qoecast",
        "version": __version__,
        "command": command,
        "argv": sys.argv[1:],
        "options": {k: v for k, v in vars(args_ns).items() if k != "func"},
        "master_seed": seed,
        "created_unix": time.time(),
        "artifacts": sorted(artifacts),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")


# ----------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for i in range(args.traces):
        cfg = GeneratorConfig(
            seed=derive_seed(args.seed, f"trace:{i}"),
            duration_s=args.duration,
            window_s=args.window_s,
            trace_id=f"trace_{i:02d}",
        )
        trace = generate_trace(cfg)
        suffix = "ndjson" if args.format == "ndjson" else "csv"
        trace_path = out / f"trace_{i:02d}.{suffix}"
        labels_path = out / f"labels_{i:02d}.csv"
        write_trace(trace, trace_path, fmt=args.format, labels_path=labels_path,
                    inband_qoe=args.inband_qoe, window_s=args.window_s)
        artifacts += [trace_path.name, labels_path.name]
    _write_manifest(out, "generate", args, args.seed, artifacts)
    print(f"wrote {args.traces} trace(s) of {args.duration} s to {out}")
    return 0


def _load_traces(data_dir: Path, fmt_hint: str | None = None):
    traces = []
    paths = sorted(list(data_dir.glob("trace_*.csv")) + list(data_dir.glob("trace_*.ndjson")))
    if not paths:
        raise QoecastError(f"no trace_*.csv / trace_*.ndjson files in {data_dir}")
    for p in paths:
        labels = data_dir / p.name.replace("trace_", "labels_").replace(p.suffix, ".csv")
        res = load_trace(p, fmt=fmt_hint, labels_path=labels if labels.exists() else None)
        traces.append(res.trace)
    return traces


def cmd_prepare(args) -> int:
    traces = _load_traces(Path(args.data))
    ds = build_dataset(traces, window_s=args.window_s, context=args.context)
    out = Path(args.out)
    save_dataset(ds, out)
    _write_manifest(out, "prepare", args, None,
                    ["train.ndjson", "val.ndjson", "test.ndjson",
                     "scaler.json", "dataset.json"])
    counts = {p: len(getattr(ds.split, p)) for p in ("train", "val", "test")}
    print(f"prepared dataset at {out}: {counts}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(Path(args.data))
    config = TrainConfig(seed=args.seed, batch_size=args.batch_size,
                         max_epochs=args.max_epochs, loss=args.loss)
    out = Path(args.out)
    if args.all:
        outcomes = run_all_variants(ds, config, out)
        artifacts = ["summary.csv"] + [
            f"{o.variant_id}.bundle.json" for o in outcomes if o.bundle is not None]
        _write_manifest(out, "train", args, args.seed, artifacts)
        failed = [o for o in outcomes if o.bundle is None]
        for o in outcomes:
            line = o.status if o.bundle is None else (
                f"val_loss={o.bundle.meta['val_loss']:.6f} "
                f"epochs={o.bundle.meta['epochs']}")
            print(f"{o.variant_id:16s} {line}")
        return 0 if not failed else 2
    if args.variant is None:
        raise UsageError("train: pass --variant <id> or --all")
    cfg = replace(config, seed=derive_seed(config.seed, f"variant:{args.variant}"))
    bundle, history = train_variant(args.variant, ds, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out / f"{args.variant}.bundle.json")
    history.write_csv(out / f"{args.variant}.history.csv")
    _write_manifest(out, "train", args, args.seed,
                    [f"{args.variant}.bundle.json", f"{args.variant}.history.csv"])
    print(f"{args.variant}: epochs={bundle.meta['epochs']} "
          f"val_loss={bundle.meta['val_loss']:.6f} -> {out}")
    return 0


def _run_bundles(run_dir: Path) -> list[Path]:
    bundles = sorted(run_dir.glob("*.bundle.json"))
    if not bundles:
        raise QoecastError(f"no *.bundle.json files in {run_dir}")
    return bundles


def cmd_evaluate(args) -> int:
    ds = load_dataset(Path(args.data))
    run_dir = Path(args.run)
    reports = [evaluate(load_bundle(p), ds) for p in _run_bundles(run_dir)]
    reports = rank_variants(reports)
    out_path = run_dir / "metrics.csv"
    write_metrics_csv(reports, out_path)
    for r in reports:
        print(f"{r.variant_id:16s} rmse={r.rmse:8.4f} mae={r.mae:8.4f}")
    print(f"wrote {out_path}")
    return 0


def cmd_benchmark(args) -> int:
    ds = load_dataset(Path(args.data))
    run_dir = Path(args.run)
    reports = []
    for p in _run_bundles(run_dir):
        bundle = load_bundle(p)
        report = evaluate(bundle, ds)
        report.latency = benchmark_latency(bundle, seed=derive_seed(args.seed, f"lat:{bundle.variant_id}"))
        reports.append(report)
    reports = rank_variants(reports)
    baseline = evaluate_baseline(ds)

    write_metrics_csv(reports + [baseline], run_dir / "metrics.csv")
    with (run_dir / "rankings.csv").open("w", encoding="utf-8") as fh:
        fh.write("rank,variant_id,rmse,mae,latency_ms_batch16\n")
        for i, r in enumerate(reports, start=1):
            fh.write(f"{i},{r.variant_id},{r.rmse!r},{r.mae!r},{r.latency.mean_ms!r}\n")
    export_error_density(reports, run_dir)

    print(f"{'rank':4s} {'variant':16s} {'rmse':>9s} {'mae':>9s} {'ms/b16':>8s}")
    for i, r in enumerate(reports, start=1):
        print(f"{i:<4d} {r.variant_id:16s} {r.rmse:9.4f} {r.mae:9.4f} "
              f"{r.latency.mean_ms:8.3f}")
    print(f"{'':4s} {'last_value':16s} {baseline.rmse:9.4f} {baseline.mae:9.4f}")

    by_id = {r.variant_id: r for r in reports}
    if "gru_basic" in by_id and "lstm_basic" in by_id:
        g, l = by_id["gru_basic"], by_id["lstm_basic"]
        rel = "below" if g.mae < l.mae else "above"
        print(f"finding: gru_basic MAE {g.mae:.4f} is {rel} lstm_basic MAE {l.mae:.4f}")
    if "gru_basic" in by_id:
        budget = latency_budget(by_id["gru_basic"].latency.mean_ms)
        print(f"latency budget with gru_basic inference: total "
              f"{budget.total_ms:.1f} ms, margin {budget.margin_ms(ds.window_s):.1f} ms "
              f"at the {ds.window_s} s horizon")
    return 0


def cmd_explain(args) -> int:
    bundle = load_bundle(Path(args.bundle))
    ds = load_dataset(Path(args.data))
    seqs = getattr(ds.split, args.part)
    if not (0 <= args.index < len(seqs)):
        raise UsageError(f"--index {args.index} outside {args.part} split "
                         f"of {len(seqs)} sequences")
    seq = seqs[args.index]
    doc: dict = {
        "variant_id": bundle.variant_id,
        "method": args.method,
        "origin": list(seq.origin),
    }
    if args.method == "ig":
        att = integrated_gradients(bundle, seq.inputs, steps=args.steps)
        doc.update({
            "prediction": att.prediction,
            "baseline_prediction": att.baseline_prediction,
            "completeness_gap": att.completeness_gap,
            "attributions": [[float(v) for v in row] for row in att.values],
            "top_3": [{"window": w, "feature": f, "attribution": v}
                      for w, f, v in att.top_k(3)],
        })
    elif args.method == "attention":
        amap = attention_map(bundle, seq.inputs)
        doc.update({
            "prediction": amap.prediction,
            "weights": np.asarray(amap.weights).tolist(),
        })
    else:  # lime
        sur = lime_local(bundle, seq.inputs, seed=args.seed)
        doc.update({
            "intercept": sur.intercept,
            "r_squared": sur.r_squared,
            "coefficients": [[float(v) for v in row] for row in sur.cell_coefficients()],
        })
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_serve(args) -> int:
    bundle = load_bundle(Path(args.bundle))
    policy = FeedbackPolicy(
        alert_threshold=args.policy_alert,
        reduce_bitrate_threshold=args.policy_bitrate,
        hysteresis=args.hysteresis,
    )
    instream = sys.stdin if args.input == "-" else Path(args.input).open(encoding="utf-8")
    outstream = sys.stdout if args.out == "-" else Path(args.out).open("w", encoding="utf-8")
    try:
        summary = run_stream(bundle, policy, instream, outstream,
                             explain_on_alert=args.explain_on_alert,
                             tick_s=args.tick_s)
    finally:
        if instream is not sys.stdin:
            instream.close()
        if outstream is not sys.stdout:
            outstream.close()
    print(f"serve done: {summary}", file=sys.stderr)
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> _Parser:
    p = _Parser(prog="qoecast",
                description="Forecast video QoE from vehicular link telemetry.")
    p.add_argument("--version", action="version", version=f"qoecast {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("generate", parents=[], help="synthesize labeled traces")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--traces", type=int, default=1)
    g.add_argument("--duration", type=int, default=600, help="seconds per trace")
    g.add_argument("--window-s", type=int, default=10, dest="window_s")
    g.add_argument("--format", choices=["csv", "ndjson"], default="csv")
    g.add_argument("--inband-qoe", action="store_true",
                   help="embed window labels as per-tick qoe values")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    pr = sub.add_parser("prepare", help="window, scale and split traces")
    pr.add_argument("--data", required=True, help="directory with trace_*/labels_* files")
    pr.add_argument("--window-s", type=int, default=10, dest="window_s")
    pr.add_argument("--context", type=int, default=5)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_prepare)

    t = sub.add_parser("train", help="fit one variant or all of them")
    t.add_argument("--data", required=True, help="prepared dataset directory")
    t.add_argument("--variant", choices=list(ALL_VARIANTS))
    t.add_argument("--all", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    t.add_argument("--max-epochs", type=int, default=200, dest="max_epochs")
    t.add_argument("--loss", choices=["logcosh", "mse"], default="logcosh")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="test-split accuracy for trained bundles")
    e.add_argument("--data", required=True)
    e.add_argument("--run", required=True, help="directory with *.bundle.json")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("benchmark", help="accuracy + latency + rankings + densities")
    b.add_argument("--data", required=True)
    b.add_argument("--run", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_benchmark)

    x = sub.add_parser("explain", help="explain one test prediction")
    x.add_argument("--bundle", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--part", choices=["train", "val", "test"], default="test")
    x.add_argument("--index", type=int, default=0)
    x.add_argument("--method", choices=["ig", "attention", "lime"], default="ig")
    x.add_argument("--steps", type=int, default=64)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out")
    x.set_defaults(func=cmd_explain)

    s = sub.add_parser("serve", help="stream NDJSON telemetry to NDJSON decisions")
    s.add_argument("--bundle", required=True)
    s.add_argument("--input", default="-", help="NDJSON file or - for stdin")
    s.add_argument("--out", default="-", help="NDJSON file or - for stdout")
    s.add_argument("--policy-alert", type=float, default=50.0, dest="policy_alert")
    s.add_argument("--policy-bitrate", type=float, default=70.0, dest="policy_bitrate")
    s.add_argument("--hysteresis", type=float, default=3.0)
    s.add_argument("--tick-s", type=float, default=1.0, dest="tick_s")
    s.add_argument("--explain-on-alert", action="store_true", dest="explain_on_alert")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help()
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except QoecastError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
