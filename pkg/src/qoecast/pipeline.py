"""Feature pipeline: windows, scaling, context sequences, chronological split.

Ticks are aggregated into fixed, non-overlapping windows; each window becomes
a 6-feature vector whose last entry is the window's QoE (so models see QoE
history as an autoregressive input). Min-max scaling is fitted on training
windows only. A model input is the 5-window context preceding the target
window; targets are the scaled QoE of the next window.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InsufficientData,
    NoCompleteWindow,
    TooFewSequences,
    TraceTooShort,
)
from .synthgen import qoe_oracle
from .telemetry import Trace, fmt_float

FEATURE_NAMES = (
    "thr_mean_mbps",
    "jitter_mean_ms",
    "loss_rate_mean",
    "loss_count_sum",
    "speed_mean_kmh",
    "qoe",
)
N_FEATURES = len(FEATURE_NAMES)
QOE_FEATURE = FEATURE_NAMES.index("qoe")

DEFAULT_WINDOW_S = 10
DEFAULT_CONTEXT = 5
DEFAULT_HORIZON = 1
DEFAULT_FRACTIONS = (0.70, 0.10, 0.20)
MIN_WINDOW_COVERAGE = 0.8
MIN_SEQUENCES = 10


@dataclass(frozen=True)
class WindowFeatures:
    """Aggregate features of one complete window."""

    window_index: int
    features: np.ndarray  # (6,) float64, FEATURE_NAMES order

    @property
    def qoe(self) -> float:
        return float(self.features[QOE_FEATURE])


@dataclass
class WindowingResult:
    windows: list[WindowFeatures]
    dropped: list[tuple[int, str]]  # (window_index, reason)


def window_trace(trace: Trace, window_s: int = DEFAULT_WINDOW_S) -> WindowingResult:
    """Aggregate a trace into consecutive windows.

    Windows missing more than 20% of their expected ticks are dropped and
    reported. QoE comes from the trace's labels when present, otherwise from
    the oracle over the window's mean link stats, chained through the
    previous kept window.
    """
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    window_ms = window_s * 1000
    expected = round(window_s / trace.tick_s)
    if expected < 1:
        raise ValueError("window shorter than one tick")

    by_window: dict[int, list] = {}
    for s in trace.samples:
        by_window.setdefault(s.ts_ms // window_ms, []).append(s)

    labels = trace.label_map()
    windows: list[WindowFeatures] = []
    dropped: list[tuple[int, str]] = []
    prev_qoe: float | None = None
    for w in sorted(by_window):
        ticks = by_window[w]
        if len(ticks) < MIN_WINDOW_COVERAGE * expected:
            dropped.append((int(w), f"{len(ticks)}/{expected} ticks"))
            continue
        thr = float(np.mean([t.throughput_mbps for t in ticks]))
        jit = float(np.mean([t.jitter_ms for t in ticks]))
        loss = float(np.mean([t.loss_rate for t in ticks]))
        loss_count = float(sum(t.loss_count for t in ticks))
        speed = float(np.mean([t.speed_kmh for t in ticks]))
        if w in labels:
            q = labels[w]
        else:
            q = qoe_oracle(thr, loss * 100.0, jit, prev_qoe)
        prev_qoe = q
        feats = np.array([thr, jit, loss, loss_count, speed, q], dtype=np.float64)
        windows.append(WindowFeatures(window_index=int(w), features=feats))
    if not windows:
        raise NoCompleteWindow(
            f"trace {trace.trace_id!r}: no window reached "
            f"{MIN_WINDOW_COVERAGE:.0%} tick coverage"
        )
    return WindowingResult(windows=windows, dropped=dropped)


# ------------------------------------------------------------------ scaling

@dataclass(frozen=True)
class ScalerStats:
    """Per-feature min-max statistics fitted on training windows only.

    Features whose min equals max are degenerate and map to 0.0. The target
    (next-window QoE) keeps its own min/max, which coincide with the qoe
    feature's when fitted from the same windows.
    """

    mins: np.ndarray  # (6,)
    maxs: np.ndarray  # (6,)
    target_min: float
    target_max: float
    degenerate: np.ndarray  # (6,) bool

    def to_dict(self) -> dict:
        return {
            "mins": [float(x) for x in self.mins],
            "maxs": [float(x) for x in self.maxs],
            "target_min": float(self.target_min),
            "target_max": float(self.target_max),
            "degenerate": [bool(x) for x in self.degenerate],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerStats":
        return cls(
            mins=np.asarray(d["mins"], dtype=np.float64),
            maxs=np.asarray(d["maxs"], dtype=np.float64),
            target_min=float(d["target_min"]),
            target_max=float(d["target_max"]),
            degenerate=np.asarray(d["degenerate"], dtype=bool),
        )


def scaler_fingerprint(stats: ScalerStats) -> int:
    """CRC-32 over the canonical little-endian bytes of the statistics."""
    crc = 0
    for arr in (stats.mins, stats.maxs,
                np.array([stats.target_min, stats.target_max]),
                stats.degenerate.astype(np.float64)):
        crc = zlib.crc32(np.ascontiguousarray(arr, dtype="<f8").tobytes(), crc)
    return crc


def fit_scaler(windows: list[WindowFeatures]) -> ScalerStats:
    if len(windows) < 2:
        raise InsufficientData(f"need at least 2 windows to fit a scaler, got {len(windows)}")
    mat = np.stack([w.features for w in windows])
    mins = mat.min(axis=0)
    maxs = mat.max(axis=0)
    degenerate = maxs == mins
    return ScalerStats(
        mins=mins,
        maxs=maxs,
        target_min=float(mins[QOE_FEATURE]),
        target_max=float(maxs[QOE_FEATURE]),
        degenerate=degenerate,
    )


def scale_features(stats: ScalerStats, raw: np.ndarray) -> np.ndarray:
    """Min-max scale raw feature rows (..., 6). Never clamped: values outside
    the fitted range scale past [0, 1], which is intentional for test data."""
    raw = np.asarray(raw, dtype=np.float64)
    span = np.where(stats.degenerate, 1.0, stats.maxs - stats.mins)
    scaled = (raw - stats.mins) / span
    return np.where(stats.degenerate, 0.0, scaled)


def scale_target(stats: ScalerStats, qoe: float | np.ndarray):
    if stats.target_max == stats.target_min:
        return np.zeros_like(np.asarray(qoe, dtype=np.float64)) + 0.0
    return (np.asarray(qoe, dtype=np.float64) - stats.target_min) / (stats.target_max - stats.target_min)


def inverse_target(stats: ScalerStats, scaled: float | np.ndarray):
    """Map scaled predictions back to QoE units. Identity composed with
    scale_target on non-degenerate targets."""
    if stats.target_max == stats.target_min:
        return np.zeros_like(np.asarray(scaled, dtype=np.float64)) + stats.target_min
    return stats.target_min + np.asarray(scaled, dtype=np.float64) * (stats.target_max - stats.target_min)


# ---------------------------------------------------------------- sequences

@dataclass(frozen=True)
class SequenceSample:
    """One supervised example: 5 consecutive scaled windows and the scaled
    QoE of the window after them. origin identifies the source windows;
    target_ts_ms positions the target window on the dataset's global
    timeline (trace offsets included) for chronological ordering."""

    inputs: np.ndarray  # (context, 6) float64
    target: float
    origin: tuple[str, int]  # (trace_id, first window index)
    target_ts_ms: int


def make_sequences(
    windows: list[WindowFeatures],
    scaled: np.ndarray,
    scaled_targets: np.ndarray,
    trace_id: str,
    window_s: int = DEFAULT_WINDOW_S,
    context: int = DEFAULT_CONTEXT,
    horizon: int = DEFAULT_HORIZON,
    ts_offset_ms: int = 0,
) -> list[SequenceSample]:
    """Slide a context window (stride 1) over runs of consecutive windows.

    scaled/scaled_targets are aligned with windows. A sequence never spans a
    gap in window indices, so dropped windows break runs. Raises
    TraceTooShort when the trace yields no sequence at all.
    """
    if len(windows) != len(scaled) or len(windows) != len(scaled_targets):
        raise ValueError("windows and scaled arrays must align")
    need = context + horizon
    out: list[SequenceSample] = []
    window_ms = window_s * 1000
    n = len(windows)
    for i in range(n - need + 1):
        first = windows[i].window_index
        # consecutive indices only: no dropped window inside the span
        if windows[i + need - 1].window_index - first != need - 1:
            continue
        inputs = scaled[i : i + context].copy()
        target = float(scaled_targets[i + context + horizon - 1])
        target_idx = windows[i + context + horizon - 1].window_index
        out.append(
            SequenceSample(
                inputs=inputs,
                target=target,
                origin=(trace_id, first),
                target_ts_ms=ts_offset_ms + target_idx * window_ms,
            )
        )
    if not out:
        raise TraceTooShort(
            f"trace {trace_id!r}: {n} usable windows give no "
            f"{context}+{horizon}-window sequence"
        )
    return out


@dataclass
class DatasetSplit:
    """Chronological train/val/test partition of sequences."""

    train: list[SequenceSample]
    val: list[SequenceSample]
    test: list[SequenceSample]
    train_end_ts_ms: int
    val_end_ts_ms: int


def chrono_split(
    sequences: list[SequenceSample],
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
) -> DatasetSplit:
    """Order by target timestamp and cut 70/10/20 (floor, remainder to test)."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be non-negative and sum to 1: {fractions}")
    n = len(sequences)
    if n < MIN_SEQUENCES:
        raise TooFewSequences(f"got {n} sequences, need at least {MIN_SEQUENCES}")
    ordered = sorted(sequences, key=lambda s: s.target_ts_ms)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    train = ordered[:n_train]
    val = ordered[n_train : n_train + n_val]
    test = ordered[n_train + n_val :]
    return DatasetSplit(
        train=train,
        val=val,
        test=test,
        train_end_ts_ms=train[-1].target_ts_ms if train else -1,
        val_end_ts_ms=val[-1].target_ts_ms if val else -1,
    )


# ------------------------------------------------------------ full assembly

@dataclass
class PreparedDataset:
    """Everything a model needs: the split, the scaler it was scaled with,
    and the windowing geometry."""

    split: DatasetSplit
    scaler: ScalerStats
    window_s: int = DEFAULT_WINDOW_S
    context_len: int = DEFAULT_CONTEXT
    horizon: int = DEFAULT_HORIZON
    feature_order: tuple[str, ...] = FEATURE_NAMES
    dropped_windows: list[tuple[str, int, str]] = field(default_factory=list)

    def arrays(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        seqs = getattr(self.split, part)
        if not seqs:
            return (np.zeros((0, self.context_len, N_FEATURES)), np.zeros((0,)))
        X = np.stack([s.inputs for s in seqs])
        y = np.array([s.target for s in seqs], dtype=np.float64)
        return X, y


def build_dataset(
    traces: list[Trace],
    window_s: int = DEFAULT_WINDOW_S,
    context: int = DEFAULT_CONTEXT,
    horizon: int = DEFAULT_HORIZON,
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
) -> PreparedDataset:
    """Window traces, split chronologically, fit the scaler on training
    windows only, and emit scaled sequences.

    Traces are laid on a global timeline in input order (each offset by the
    cumulative span of its predecessors) so the chronological split is well
    defined across traces. The scaler sees exactly the windows referenced by
    training sequences, then everything is scaled with it; leakage from val
    or test windows is structurally impossible.
    """
    if not traces:
        raise InsufficientData("no traces given")
    window_ms = window_s * 1000

    per_trace: list[tuple[Trace, list[WindowFeatures], int]] = []
    dropped: list[tuple[str, int, str]] = []
    offset = 0
    for tr in traces:
        res = window_trace(tr, window_s)
        per_trace.append((tr, res.windows, offset))
        dropped.extend((tr.trace_id, w, why) for w, why in res.dropped)
        n_windows = int(tr.samples[-1].ts_ms // window_ms) + 1
        offset += n_windows * window_ms

    # raw sequence skeletons: (trace slot, start idx, target_ts)
    need = context + horizon
    skeletons: list[tuple[int, int, int]] = []
    for slot, (tr, windows, off) in enumerate(per_trace):
        for i in range(len(windows) - need + 1):
            if windows[i + need - 1].window_index - windows[i].window_index != need - 1:
                continue
            target_idx = windows[i + context + horizon - 1].window_index
            skeletons.append((slot, i, off + target_idx * window_ms))
    if len(skeletons) < MIN_SEQUENCES:
        raise TooFewSequences(
            f"got {len(skeletons)} sequences across {len(traces)} traces, "
            f"need at least {MIN_SEQUENCES}"
        )
    skeletons.sort(key=lambda s: s[2])
    n = len(skeletons)
    n_train = int(n * fractions[0])

    train_windows: list[WindowFeatures] = []
    seen: set[tuple[int, int]] = set()
    for slot, i, _ in skeletons[:n_train]:
        _, windows, _ = per_trace[slot]
        for j in range(i, i + need):
            key = (slot, j)
            if key not in seen:
                seen.add(key)
                train_windows.append(windows[j])
    scaler = fit_scaler(train_windows)

    sequences: list[SequenceSample] = []
    for tr, windows, off in per_trace:
        raw = np.stack([w.features for w in windows])
        scaled = scale_features(scaler, raw)
        targets = scale_target(scaler, raw[:, QOE_FEATURE])
        sequences.extend(
            make_sequences(windows, scaled, targets, tr.trace_id, window_s,
                           context, horizon, ts_offset_ms=off)
        )
    split = chrono_split(sequences, fractions)
    return PreparedDataset(
        split=split,
        scaler=scaler,
        window_s=window_s,
        context_len=context,
        horizon=horizon,
        dropped_windows=dropped,
    )


# ----------------------------------------------------------------- dataset IO

def save_dataset(ds: PreparedDataset, out_dir: str | Path) -> None:
    """Write a prepared dataset as NDJSON splits + scaler + geometry."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for part in ("train", "val", "test"):
        with (out / f"{part}.ndjson").open("w", encoding="utf-8") as fh:
            for s in getattr(ds.split, part):
                fh.write(json.dumps({
                    "origin": [s.origin[0], s.origin[1]],
                    "inputs": [[float(v) for v in row] for row in s.inputs],
                    "target": float(s.target),
                    "target_ts_ms": s.target_ts_ms,
                }) + "\n")
    (out / "scaler.json").write_text(
        json.dumps(ds.scaler.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "dataset.json").write_text(json.dumps({
        "window_s": ds.window_s,
        "context_len": ds.context_len,
        "horizon": ds.horizon,
        "feature_order": list(ds.feature_order),
        "counts": {p: len(getattr(ds.split, p)) for p in ("train", "val", "test")},
        "train_end_ts_ms": ds.split.train_end_ts_ms,
        "val_end_ts_ms": ds.split.val_end_ts_ms,
        "dropped_windows": [list(d) for d in ds.dropped_windows],
    }, indent=2) + "\n", encoding="utf-8")


def load_dataset(in_dir: str | Path) -> PreparedDataset:
    src = Path(in_dir)
    meta = json.loads((src / "dataset.json").read_text(encoding="utf-8"))
    scaler = ScalerStats.from_dict(json.loads((src / "scaler.json").read_text(encoding="utf-8")))
    parts = {}
    for part in ("train", "val", "test"):
        seqs = []
        with (src / f"{part}.ndjson").open(encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                seqs.append(SequenceSample(
                    inputs=np.asarray(d["inputs"], dtype=np.float64),
                    target=float(d["target"]),
                    origin=(d["origin"][0], int(d["origin"][1])),
                    target_ts_ms=int(d["target_ts_ms"]),
                ))
        parts[part] = seqs
    split = DatasetSplit(
        train=parts["train"], val=parts["val"], test=parts["test"],
        train_end_ts_ms=int(meta["train_end_ts_ms"]),
        val_end_ts_ms=int(meta["val_end_ts_ms"]),
    )
    return PreparedDataset(
        split=split,
        scaler=scaler,
        window_s=int(meta["window_s"]),
        context_len=int(meta["context_len"]),
        horizon=int(meta["horizon"]),
        feature_order=tuple(meta["feature_order"]),
        dropped_windows=[tuple(d) for d in meta.get("dropped_windows", [])],
    )
