"""Streaming forecasts with feedback actions.

Samples arrive one at a time (NDJSON on a stream). Ticks accumulate into
fixed windows; each completed window joins a ring of the last five, and once
the ring is full every further completed window produces a one-window-ahead
QoE forecast plus a feedback action. The first decision therefore lands
exactly when the fifth window completes.

The window's own QoE feature comes from measured in-band values when the
stream carries them, else from the previous forecast, else from the QoE
oracle over the window's means. Windows with under 80% tick coverage (or
wholly missing window slots) break context continuity and clear the ring,
the same rule the offline pipeline applies to sequences.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, IO, Iterable

import numpy as np

from .errors import MalformedRow, OutOfOrderSample, QoecastError, ScalerMissing
from .explain import integrated_gradients
from .pipeline import MIN_WINDOW_COVERAGE, inverse_target, scale_features
from .synthgen import qoe_oracle
from .telemetry import TelemetrySample, _parse_record
from .zoo import BundleRunner, ModelBundle

ACTIONS = ("none", "reduce_bitrate", "alert")
_SEVERITY = {a: i for i, a in enumerate(ACTIONS)}


@dataclass(frozen=True)
class FeedbackPolicy:
    """Action thresholds in QoE units with de-escalation hysteresis.

    Predictions below alert_threshold raise an alert; between the two
    thresholds they ask for a bitrate reduction. Escalation is immediate;
    an active action is kept until the prediction clears its threshold by
    the hysteresis margin.
    """

    alert_threshold: float = 50.0
    reduce_bitrate_threshold: float = 70.0
    hysteresis: float = 3.0

    def __post_init__(self):
        if not (0.0 <= self.alert_threshold <= self.reduce_bitrate_threshold <= 100.0):
            raise ValueError(
                f"need 0 <= alert <= reduce_bitrate <= 100, got "
                f"{self.alert_threshold}/{self.reduce_bitrate_threshold}")
        if self.hysteresis < 0:
            raise ValueError("hysteresis must be non-negative")


def _classify(pred: float, alert_t: float, reduce_t: float) -> str:
    if pred < alert_t:
        return "alert"
    if pred < reduce_t:
        return "reduce_bitrate"
    return "none"


def decide(policy: FeedbackPolicy, qoe_pred: float, prev_action: str = "none") -> str:
    """Map a prediction to an action given the previous action.

    Worsening predictions escalate at the base thresholds right away;
    improving ones de-escalate only once they exceed the relevant threshold
    plus the hysteresis margin, so a borderline recovery does not flap.
    """
    if prev_action not in _SEVERITY:
        raise ValueError(f"unknown previous action {prev_action!r}")
    base = _classify(qoe_pred, policy.alert_threshold, policy.reduce_bitrate_threshold)
    if _SEVERITY[base] >= _SEVERITY[prev_action]:
        return base
    return _classify(qoe_pred, policy.alert_threshold + policy.hysteresis,
                     policy.reduce_bitrate_threshold + policy.hysteresis)


@dataclass
class ForecastDecision:
    ts_ms: int
    horizon_s: int
    qoe_pred: float
    action: str
    latency_ms: float = 0.0
    explain: list[dict] | None = None
    inputs_scaled: np.ndarray | None = None  # (5, 6), for explanations

    def to_record(self) -> dict:
        rec = {
            "ts_ms": self.ts_ms,
            "horizon_s": self.horizon_s,
            "qoe_pred": self.qoe_pred,
            "action": self.action,
            "latency_ms": self.latency_ms,
        }
        if self.explain is not None:
            rec["explain"] = self.explain
        return rec


@dataclass
class _WindowAccum:
    index: int
    ticks: int = 0
    thr_sum: float = 0.0
    jitter_sum: float = 0.0
    loss_rate_sum: float = 0.0
    loss_count_sum: float = 0.0
    speed_sum: float = 0.0
    qoe_sum: float = 0.0
    qoe_ticks: int = 0

    def add(self, s: TelemetrySample) -> None:
        self.ticks += 1
        self.thr_sum += s.throughput_mbps
        self.jitter_sum += s.jitter_ms
        self.loss_rate_sum += s.loss_rate
        self.loss_count_sum += s.loss_count
        self.speed_sum += s.speed_kmh
        if s.qoe is not None:
            self.qoe_sum += s.qoe
            self.qoe_ticks += 1


@dataclass
class StreamStats:
    ticks: int = 0
    windows: int = 0
    dropped_windows: int = 0
    forecasts: int = 0
    errors: int = 0
    actions: dict = field(default_factory=lambda: {a: 0 for a in ACTIONS})


class StreamState:
    """Incremental forecasting state over one telemetry stream."""

    def __init__(self, bundle: ModelBundle, policy: FeedbackPolicy,
                 tick_s: float = 1.0):
        if bundle.scaler is None:
            raise ScalerMissing("bundle carries no scaler statistics")
        self.bundle = bundle
        self.policy = policy
        self.tick_s = tick_s
        self.runner = BundleRunner(bundle)
        self.window_ms = bundle.window_s * 1000
        self.expected_ticks = round(bundle.window_s / tick_s)
        self.context_len = bundle.context_len
        self._ring: deque[np.ndarray] = deque(maxlen=bundle.context_len)
        self._accum: _WindowAccum | None = None
        self._next_window: int | None = None  # expected index of the next window slot
        self._last_ts: int | None = None
        self._prev_window_qoe: float | None = None
        self.last_prediction: float | None = None
        self.prev_action = "none"
        self.stats = StreamStats()

    # ------------------------------------------------------------- ingest

    def ingest(self, sample: TelemetrySample) -> ForecastDecision | None:
        """Feed one tick; returns a decision when it completes a window that
        fills the context ring. Out-of-order ticks raise and change nothing."""
        if self._last_ts is not None and sample.ts_ms <= self._last_ts:
            raise OutOfOrderSample(
                f"ts_ms {sample.ts_ms} not after {self._last_ts}")
        self._last_ts = sample.ts_ms
        self.stats.ticks += 1

        w = int(sample.ts_ms // self.window_ms)
        decision = None
        if self._accum is not None and w > self._accum.index:
            # gappy window closed by the first tick beyond its boundary
            decision = self._finalize(self._accum)
            self._accum = None
        if self._accum is None:
            if self._next_window is not None and w > self._next_window:
                # empty window slots in between: context continuity is gone
                self.stats.dropped_windows += w - self._next_window
                self._ring.clear()
            self._accum = _WindowAccum(index=w)
        self._accum.add(sample)
        if self._accum.ticks == self.expected_ticks:
            inner = self._finalize(self._accum)
            decision = inner if inner is not None else decision
            self._accum = None
        return decision

    def flush(self) -> ForecastDecision | None:
        """Finalize a pending partial window at stream end."""
        if self._accum is None:
            return None
        decision = self._finalize(self._accum)
        self._accum = None
        return decision

    def _finalize(self, acc: _WindowAccum) -> ForecastDecision | None:
        self._next_window = acc.index + 1
        if acc.ticks < MIN_WINDOW_COVERAGE * self.expected_ticks:
            self.stats.dropped_windows += 1
            self._ring.clear()
            return None
        n = acc.ticks
        thr = acc.thr_sum / n
        jitter = acc.jitter_sum / n
        loss_rate = acc.loss_rate_sum / n
        speed = acc.speed_sum / n
        if acc.qoe_ticks > 0:
            qoe = acc.qoe_sum / acc.qoe_ticks
        elif self.last_prediction is not None:
            qoe = self.last_prediction
        else:
            qoe = qoe_oracle(thr, loss_rate * 100.0, jitter, self._prev_window_qoe)
        self._prev_window_qoe = qoe
        self._ring.append(np.array(
            [thr, jitter, loss_rate, acc.loss_count_sum, speed, qoe],
            dtype=np.float64))
        self.stats.windows += 1
        if len(self._ring) < self.context_len:
            return None
        return self._forecast(acc.index)

    def _forecast(self, window_index: int) -> ForecastDecision:
        raw = np.stack(self._ring)
        scaled = scale_features(self.bundle.scaler, raw)
        pred_scaled, _ = self.runner.predict(scaled[None])
        pred = float(inverse_target(self.bundle.scaler, pred_scaled[0]))
        action = decide(self.policy, pred, self.prev_action)
        self.prev_action = action
        self.last_prediction = pred
        self.stats.forecasts += 1
        self.stats.actions[action] += 1
        return ForecastDecision(
            ts_ms=(window_index + 1) * self.window_ms,
            horizon_s=self.bundle.window_s,
            qoe_pred=pred,
            action=action,
            inputs_scaled=scaled,
        )


# ----------------------------------------------------------------- NDJSON IO

def _parse_stream_line(line: str, record_no: int) -> TelemetrySample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRow(record_no, "record", f"invalid json: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise MalformedRow(record_no, "record", "not an object")
    return _parse_record(obj, record_no)


def run_stream(
    bundle: ModelBundle,
    policy: FeedbackPolicy,
    instream: IO[str] | Iterable[str],
    outstream: IO[str],
    explain_on_alert: bool = False,
    tick_s: float = 1.0,
    clock: Callable[[], float] = time.perf_counter,
    explain_top_k: int = 3,
) -> dict:
    """Consume NDJSON telemetry, emit NDJSON decisions, return a summary.

    Bad input lines become error records on the output stream instead of
    terminating the run. Each decision carries the ingest-to-emit latency as
    measured by `clock`. When explain_on_alert is set, alert decisions are
    annotated with the top attribution cells; cheaper decisions never wait
    on explanation work. Floats are rendered with shortest round-trip
    formatting, so equal predictions give byte-equal output.
    """
    state = StreamState(bundle, policy, tick_s=tick_s)
    record_no = 0

    def emit(decision: ForecastDecision, t0: float) -> None:
        if explain_on_alert and decision.action == "alert":
            attribution = integrated_gradients(bundle, decision.inputs_scaled)
            decision.explain = [
                {"window": w, "feature": f, "attribution": v}
                for w, f, v in attribution.top_k(explain_top_k)
            ]
        decision.latency_ms = (clock() - t0) * 1000.0
        outstream.write(json.dumps(decision.to_record()) + "\n")

    for line in instream:
        if not line.strip():
            continue
        record_no += 1
        t0 = clock()
        try:
            sample = _parse_stream_line(line, record_no)
            decision = state.ingest(sample)
        except QoecastError as exc:
            state.stats.errors += 1
            outstream.write(json.dumps({
                "error": type(exc).__name__,
                "record": record_no,
                "detail": str(exc),
            }) + "\n")
            continue
        if decision is not None:
            emit(decision, t0)

    t0 = clock()
    tail = state.flush()
    if tail is not None:
        emit(tail, t0)

    summary = {
        "ticks": state.stats.ticks,
        "windows": state.stats.windows,
        "dropped_windows": state.stats.dropped_windows,
        "forecasts": state.stats.forecasts,
        "errors": state.stats.errors,
        "actions": state.stats.actions,
    }
    outstream.write(json.dumps({"summary": summary}) + "\n")
    return summary
