"""Raw telemetry records and trace file IO.

A trace is an ordered series of per-tick link/vehicle measurements, plus
optional per-window QoE labels kept in a sidecar table. Traces are immutable
once built; every later stage treats them as read-only inputs.

Supported on-disk formats: CSV with a fixed header, and NDJSON with one
object per line using the same keys. Labels always travel as a small CSV
(window_index,qoe).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyTrace, MalformedRow, NonMonotonicTimestamp

logger = logging.getLogger(__name__)

FIELD_NAMES = ("ts_ms", "throughput_mbps", "jitter_ms", "loss_rate", "loss_count", "speed_kmh")
CSV_HEADER = ",".join(FIELD_NAMES)
LABELS_HEADER = "window_index,qoe"


def fmt_float(x: float) -> str:
    """Shortest decimal string that round-trips back to the same float."""
    return repr(float(x))


@dataclass(frozen=True)
class TelemetrySample:
    """One measurement tick.

    qoe is an optional in-band measured QoE value; it is absent in stored
    traces (labels live in the sidecar) but may appear on live streams.
    """

    ts_ms: int
    throughput_mbps: float
    jitter_ms: float
    loss_rate: float
    loss_count: int
    speed_kmh: float
    qoe: float | None = None

    def to_dict(self) -> dict:
        d = {
            "ts_ms": self.ts_ms,
            "throughput_mbps": self.throughput_mbps,
            "jitter_ms": self.jitter_ms,
            "loss_rate": self.loss_rate,
            "loss_count": self.loss_count,
            "speed_kmh": self.speed_kmh,
        }
        if self.qoe is not None:
            d["qoe"] = self.qoe
        return d


@dataclass(frozen=True)
class Trace:
    """An ordered, strictly-monotonic series of samples with optional labels.

    labels, when present, is a tuple of (window_index, qoe) pairs. The window
    length is not stored here; operations that need it take it as a
    parameter.
    """

    samples: tuple[TelemetrySample, ...]
    tick_s: float = 1.0
    labels: tuple[tuple[int, float], ...] | None = None
    trace_id: str = ""

    def __post_init__(self):
        if not self.samples:
            raise EmptyTrace("trace has no samples")
        if self.tick_s <= 0:
            raise ValueError("tick_s must be positive")
        prev = None
        for s in self.samples:
            if prev is not None and s.ts_ms <= prev:
                raise NonMonotonicTimestamp(
                    f"ts_ms {s.ts_ms} follows {prev}; timestamps must strictly increase"
                )
            prev = s.ts_ms
        if self.labels is not None:
            for idx, q in self.labels:
                if not (0.0 <= q <= 100.0):
                    raise ValueError(f"label for window {idx} outside [0, 100]: {q}")

    @property
    def duration_s(self) -> float:
        """Covered span in seconds, counting the final tick's full period."""
        return (self.samples[-1].ts_ms / 1000.0) + self.tick_s

    def label_map(self) -> dict[int, float]:
        return dict(self.labels) if self.labels else {}


@dataclass
class LoadResult:
    trace: Trace
    skipped: list[tuple[int, str]] = field(default_factory=list)


# ------------------------------------------------------------------ parsing

_RANGE_CHECKS = {
    "throughput_mbps": lambda v: v >= 0.0,
    "jitter_ms": lambda v: v >= 0.0,
    "loss_rate": lambda v: 0.0 <= v <= 1.0,
    "loss_count": lambda v: v >= 0,
    "speed_kmh": lambda v: v >= 0.0,
}


def _parse_record(raw: dict, record_no: int) -> TelemetrySample:
    """Validate one raw string/number mapping into a sample.

    Raises MalformedRow naming the first offending field.
    """
    vals = {}
    for name in FIELD_NAMES:
        if name not in raw or raw[name] in ("", None):
            raise MalformedRow(record_no, name, "missing")
        v = raw[name]
        try:
            if name == "ts_ms":
                parsed = int(v)
            elif name == "loss_count":
                # tolerate float-formatted integers from JSON encoders
                parsed = int(float(v))
                if parsed != float(v):
                    raise ValueError("not an integer")
            else:
                parsed = float(v)
        except (TypeError, ValueError) as exc:
            raise MalformedRow(record_no, name, str(exc)) from None
        vals[name] = parsed
    if vals["ts_ms"] < 0:
        raise MalformedRow(record_no, "ts_ms", "negative")
    for name, ok in _RANGE_CHECKS.items():
        if not ok(vals[name]):
            raise MalformedRow(record_no, name, f"out of range: {vals[name]}")
    qoe = None
    if raw.get("qoe") not in ("", None):
        try:
            qoe = float(raw["qoe"])
        except (TypeError, ValueError):
            raise MalformedRow(record_no, "qoe", "not a number") from None
        if not (0.0 <= qoe <= 100.0):
            raise MalformedRow(record_no, "qoe", f"out of range: {qoe}")
    return TelemetrySample(qoe=qoe, **vals)


def _iter_csv_records(text: str):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyTrace("file has no header row") from None
    header = [h.strip() for h in header]
    missing = [n for n in FIELD_NAMES if n not in header]
    if missing:
        raise MalformedRow(0, missing[0], "column missing from header")
    extra = [h for h in header if h not in FIELD_NAMES and h != "qoe"]
    if extra:
        logger.warning("ignoring unknown trace columns: %s", ", ".join(extra))
    for row in reader:
        if not row or all(not c.strip() for c in row):
            yield None, None  # blank line, skipped
            continue
        yield dict(zip(header, row)), None


def _iter_ndjson_records(text: str):
    warned: set[str] = set()
    for line in text.splitlines():
        if not line.strip():
            yield None, None
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            yield None, f"invalid json: {exc.msg}"
            continue
        if not isinstance(obj, dict):
            yield None, "record is not an object"
            continue
        unknown = set(obj) - set(FIELD_NAMES) - {"qoe"}
        for key in unknown - warned:
            logger.warning("ignoring unknown trace field: %s", key)
            warned.add(key)
        yield obj, None


def load_trace(
    path: str | Path,
    fmt: str | None = None,
    labels_path: str | Path | None = None,
    tick_s: float = 1.0,
    strict: bool = True,
    trace_id: str | None = None,
) -> LoadResult:
    """Load a trace file into a Trace.

    fmt is "csv" or "ndjson"; when omitted it is inferred from the suffix.
    In strict mode (default) the first malformed value raises MalformedRow
    and only blank lines are skipped; with strict=False malformed rows are
    skipped and reported in LoadResult.skipped as (record_no, reason).
    Timestamp monotonicity and emptiness are always hard errors.
    """
    path = Path(path)
    if fmt is None:
        fmt = "ndjson" if path.suffix in (".ndjson", ".jsonl", ".json") else "csv"
    if fmt not in ("csv", "ndjson"):
        raise ValueError(f"unknown trace format: {fmt}")
    text = path.read_text(encoding="utf-8")

    records = _iter_csv_records(text) if fmt == "csv" else _iter_ndjson_records(text)
    samples: list[TelemetrySample] = []
    skipped: list[tuple[int, str]] = []
    record_no = 0
    for raw, pre_reason in records:
        record_no += 1
        if raw is None:
            if pre_reason is None:
                skipped.append((record_no, "blank line"))
                continue
            if strict:
                raise MalformedRow(record_no, "record", pre_reason)
            skipped.append((record_no, pre_reason))
            continue
        try:
            samples.append(_parse_record(raw, record_no))
        except MalformedRow as exc:
            if strict:
                raise
            skipped.append((record_no, f"{exc.field}: skipped"))
    if not samples:
        raise EmptyTrace(f"{path}: no valid samples")
    prev = None
    for s in samples:
        if prev is not None and s.ts_ms <= prev:
            raise NonMonotonicTimestamp(
                f"{path}: ts_ms {s.ts_ms} follows {prev}; timestamps must strictly increase"
            )
        prev = s.ts_ms

    labels = load_labels(labels_path) if labels_path is not None else None
    trace = Trace(
        samples=tuple(samples),
        tick_s=tick_s,
        labels=labels,
        trace_id=trace_id if trace_id is not None else path.stem,
    )
    return LoadResult(trace=trace, skipped=skipped)


def load_labels(path: str | Path) -> tuple[tuple[int, float], ...]:
    """Load a window_index,qoe label table."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["window_index", "qoe"]:
        raise MalformedRow(0, "window_index", "bad labels header")
    out = []
    for i, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            idx, q = int(row[0]), float(row[1])
        except (IndexError, ValueError) as exc:
            raise MalformedRow(i, "qoe", str(exc)) from None
        if not (0.0 <= q <= 100.0):
            raise MalformedRow(i, "qoe", f"out of range: {q}")
        out.append((idx, q))
    return tuple(out)


# ------------------------------------------------------------------ writing

def write_trace(
    trace: Trace,
    path: str | Path,
    fmt: str | None = None,
    labels_path: str | Path | None = None,
    inband_qoe: bool = False,
    window_s: int = 10,
) -> None:
    """Write a trace (and its labels, if any) to disk.

    With inband_qoe=True each tick additionally carries its window's label
    under a "qoe" key, which is what a live probe that measures QoE in-band
    would emit. Floats use shortest round-trip formatting, so
    load(write(trace)) reproduces the trace exactly.
    """
    path = Path(path)
    if fmt is None:
        fmt = "ndjson" if path.suffix in (".ndjson", ".jsonl", ".json") else "csv"
    label_of = trace.label_map() if inband_qoe else {}
    window_ms = window_s * 1000

    def tick_qoe(s: TelemetrySample) -> float | None:
        if s.qoe is not None:
            return s.qoe
        if not label_of:
            return None
        return label_of.get(s.ts_ms // window_ms)

    lines: list[str] = []
    if fmt == "csv":
        header = CSV_HEADER + (",qoe" if inband_qoe else "")
        lines.append(header)
        for s in trace.samples:
            cells = [
                str(s.ts_ms),
                fmt_float(s.throughput_mbps),
                fmt_float(s.jitter_ms),
                fmt_float(s.loss_rate),
                str(s.loss_count),
                fmt_float(s.speed_kmh),
            ]
            if inband_qoe:
                q = tick_qoe(s)
                cells.append("" if q is None else fmt_float(q))
            lines.append(",".join(cells))
    elif fmt == "ndjson":
        for s in trace.samples:
            d = s.to_dict()
            if inband_qoe:
                q = tick_qoe(s)
                if q is not None:
                    d["qoe"] = q
            lines.append(json.dumps(d))
    else:
        raise ValueError(f"unknown trace format: {fmt}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    if labels_path is not None and trace.labels is not None:
        write_labels(trace.labels, labels_path)


def write_labels(labels, path: str | Path) -> None:
    lines = [LABELS_HEADER]
    for idx, q in labels:
        lines.append(f"{idx},{fmt_float(q)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------- validation

@dataclass
class ValidationReport:
    """Structural health summary of a trace.

    gaps: (sample_index, missing_ticks) for each hole in the tick grid,
    recorded at the index of the sample before the hole. out_of_range lists
    (sample_index, field) pairs. label_coverage is labeled windows divided by
    the number of whole windows the trace spans.
    """

    gaps: list[tuple[int, int]]
    out_of_range: list[tuple[int, str]]
    label_coverage: float

    @property
    def clean(self) -> bool:
        return not self.gaps and not self.out_of_range


def validate_trace(trace: Trace, window_s: int = 10) -> ValidationReport:
    tick_ms = trace.tick_s * 1000.0
    gaps = []
    for i in range(len(trace.samples) - 1):
        dt = trace.samples[i + 1].ts_ms - trace.samples[i].ts_ms
        missing = round(dt / tick_ms) - 1
        if missing > 0:
            gaps.append((i, missing))
    out_of_range = []
    for i, s in enumerate(trace.samples):
        for name, ok in _RANGE_CHECKS.items():
            if not ok(getattr(s, name)):
                out_of_range.append((i, name))
    n_windows = int(trace.samples[-1].ts_ms // (window_s * 1000)) + 1
    labeled = len({idx for idx, _ in (trace.labels or ()) if 0 <= idx < n_windows})
    coverage = labeled / n_windows if n_windows else 0.0
    return ValidationReport(gaps=gaps, out_of_range=out_of_range, label_coverage=coverage)
