"""Accuracy and latency measurement over the held-out test split.

Predictions are mapped back to QoE units before any metric is computed, so
MAE/RMSE are directly comparable across variants and against the naive
last-value baseline. Inference latency uses a fixed protocol: batches of 16,
10 warmup rounds, 100 timed repetitions.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptySplit, ScalerMismatch
from .pipeline import PreparedDataset, inverse_target, scaler_fingerprint
from .zoo import BundleRunner, ModelBundle, last_value_baseline, model_class_of

LATENCY_BATCH = 16
LATENCY_WARMUP = 10
LATENCY_REPS = 100

# density export merges the two non-sequence families, as in the figures
DENSITY_CLASS = {
    "gru": "gru",
    "lstm": "lstm",
    "transformer": "transformer",
    "dnn": "linear_dnn",
    "linear": "linear_dnn",
}


@dataclass
class MetricsReport:
    variant_id: str
    model_class: str
    mae: float
    rmse: float
    n_test: int
    abs_errors: np.ndarray
    latency: "LatencyStats | None" = None


@dataclass
class LatencyStats:
    batch_size: int
    reps: int
    mean_ms: float
    median_ms: float
    p95_ms: float

    @property
    def per_sample_ms(self) -> float:
        return self.mean_ms / self.batch_size


def _test_arrays(dataset: PreparedDataset):
    X, y = dataset.arrays("test")
    if len(X) == 0:
        raise EmptySplit("test split is empty")
    return X, y


def evaluate(bundle: ModelBundle, dataset: PreparedDataset,
             batch_size: int = 256) -> MetricsReport:
    """Test-split MAE and RMSE in QoE units for one bundle.

    The bundle must have been trained against this dataset's scaler;
    mismatched statistics raise rather than silently skewing the metrics.
    """
    if scaler_fingerprint(bundle.scaler) != scaler_fingerprint(dataset.scaler):
        raise ScalerMismatch(
            f"{bundle.variant_id}: bundle scaler does not match dataset scaler")
    X, y = _test_arrays(dataset)
    runner = BundleRunner(bundle)
    preds = np.concatenate([
        runner.predict(X[i : i + batch_size])[0] for i in range(0, len(X), batch_size)
    ])
    errors = (inverse_target(dataset.scaler, preds)
              - inverse_target(dataset.scaler, y))
    abs_errors = np.abs(errors)
    mae = float(abs_errors.mean())
    rmse = float(np.sqrt(np.mean(errors * errors)))
    assert rmse >= mae - 1e-9, "rmse below mae: metric computation is broken"
    return MetricsReport(
        variant_id=bundle.variant_id,
        model_class=model_class_of(bundle.variant_id),
        mae=mae,
        rmse=rmse,
        n_test=len(X),
        abs_errors=abs_errors,
    )


def evaluate_baseline(dataset: PreparedDataset) -> MetricsReport:
    """Same metrics for the carry-forward baseline (predict last window's QoE)."""
    X, y = _test_arrays(dataset)
    preds = last_value_baseline(X)
    errors = (inverse_target(dataset.scaler, preds)
              - inverse_target(dataset.scaler, y))
    abs_errors = np.abs(errors)
    return MetricsReport(
        variant_id="last_value",
        model_class="baseline",
        mae=float(abs_errors.mean()),
        rmse=float(np.sqrt(np.mean(errors * errors))),
        n_test=len(X),
        abs_errors=abs_errors,
    )


def benchmark_latency(bundle: ModelBundle, batch_size: int = LATENCY_BATCH,
                      warmup: int = LATENCY_WARMUP, reps: int = LATENCY_REPS,
                      seed: int = 0) -> LatencyStats:
    """Wall-clock forward latency per batch under the fixed protocol."""
    runner = BundleRunner(bundle)
    rng = np.random.default_rng(seed)
    batch = rng.random((batch_size, bundle.context_len, len(bundle.feature_order)))
    for _ in range(warmup):
        runner.predict(batch)
    times = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        runner.predict(batch)
        times[i] = (time.perf_counter() - t0) * 1000.0
    return LatencyStats(
        batch_size=batch_size,
        reps=reps,
        mean_ms=float(times.mean()),
        median_ms=float(np.median(times)),
        p95_ms=float(np.percentile(times, 95)),
    )


def rank_variants(reports: list[MetricsReport]) -> list[MetricsReport]:
    """Ascending RMSE, ties broken by MAE then variant id."""
    return sorted(reports, key=lambda r: (r.rmse, r.mae, r.variant_id))


def write_metrics_csv(reports: list[MetricsReport], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant_id", "model_class", "rmse", "mae",
                    "latency_ms_batch16", "latency_ms_sample", "n_test"])
        for r in reports:
            lat_b = repr(r.latency.mean_ms) if r.latency else ""
            lat_s = repr(r.latency.per_sample_ms) if r.latency else ""
            w.writerow([r.variant_id, r.model_class, repr(r.rmse), repr(r.mae),
                        lat_b, lat_s, r.n_test])


def export_error_density(reports: list[MetricsReport], out_dir,
                         bins: int = 40) -> dict[str, Path]:
    """Per-class absolute-error histograms normalized to unit area.

    Errors from all variants of a class are pooled; the dnn and linear
    families share one class. Each CSV row is bin_left,bin_right,density.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pooled: dict[str, list[np.ndarray]] = {}
    for r in reports:
        cls = DENSITY_CLASS.get(r.model_class)
        if cls is None:
            continue
        pooled.setdefault(cls, []).append(r.abs_errors)
    paths: dict[str, Path] = {}
    for cls, chunks in pooled.items():
        errs = np.concatenate(chunks)
        hi = max(float(errs.max()), 1e-9)
        counts, edges = np.histogram(errs, bins=bins, range=(0.0, hi))
        width = edges[1] - edges[0]
        density = counts / (counts.sum() * width)
        path = out / f"density_{cls}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "density"])
            for i in range(bins):
                w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])),
                            repr(float(density[i]))])
        paths[cls] = path
    return paths


# ------------------------------------------------------------ latency budget

@dataclass(frozen=True)
class LatencyBudget:
    """End-to-end glass-to-glass budget of a teleoperation loop, in ms."""

    inference_ms: float
    capture_ms: float = 18.0
    uplink_ms: float = 20.0
    downlink_ms: float = 20.0
    render_ms: float = 7.0

    @property
    def total_ms(self) -> float:
        return (self.inference_ms + self.capture_ms + self.uplink_ms
                + self.downlink_ms + self.render_ms)

    def margin_ms(self, horizon_s: float) -> float:
        """Lead time a forecast gives the operator before its window lands."""
        return horizon_s * 1000.0 - self.total_ms


def latency_budget(inference_ms: float, capture_ms: float = 18.0,
                   uplink_ms: float = 20.0, downlink_ms: float = 20.0,
                   render_ms: float = 7.0) -> LatencyBudget:
    for name, v in [("inference_ms", inference_ms), ("capture_ms", capture_ms),
                    ("uplink_ms", uplink_ms), ("downlink_ms", downlink_ms),
                    ("render_ms", render_ms)]:
        if v < 0:
            raise ValueError(f"{name} must be non-negative")
    return LatencyBudget(inference_ms, capture_ms, uplink_ms, downlink_ms, render_ms)
