"""Seeded synthetic vehicular-link traces with window-level QoE labels.

Impairments evolve as Markov episodes over link conditions: a jump chain
picks the next state, and each episode dwells for a span drawn around
episode_mean_len_s. Entering a state draws an episode operating point
uniformly from that state's sub-range of the configured global envelope;
ticks wiggle tightly around it until the episode ends, so conditions hold
within an episode and jump across episodes. Every sample stays inside the
configured bounds for any seed. Vehicle speed follows a clamped Gaussian
random walk and feeds back into the chain: the faster the vehicle, the more
likely a handover episode.

Labels are produced per window by a closed-form QoE oracle over the window's
mean link stats, smoothed against the previous window's label and perturbed
with clamped Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidConfig, SpanOutOfRange
from .seeding import derive_seed
from .telemetry import TelemetrySample, Trace

# Oracle constants. thr saturates at 25 Mbps; loss is penalized per percent;
# jitter is free below 20 ms. Smoothing leans 70/30 toward the current window.
THR_SATURATION_MBPS = 25.0
LOSS_DECAY_PER_PCT = 0.35
JITTER_DECAY_PER_MS = 0.01
JITTER_FREE_MS = 20.0
SMOOTH_CURRENT = 0.7
SMOOTH_PREVIOUS = 0.3

SPEED_WALK_SIGMA_KMH = 2.0  # random-walk step per tick
SPEED_REF_KMH = 80.0  # speed at which the handover weight peaks
HANDOVER_WEIGHT_AT_REF = 0.20

STATE_NAMES = ("good", "degraded", "handover", "congested")


def qoe_oracle(thr_mbps: float, loss_pct: float, jitter_ms: float,
               prev_qoe: float | None = None) -> float:
    """Closed-form QoE in VMAF-like units on [0, 100].

    Throughput contributes linearly up to a saturation point, loss and
    excess jitter decay the score exponentially, and the result is smoothed
    against the previous window's value when one exists.
    """
    thr_term = min(max(thr_mbps / THR_SATURATION_MBPS, 0.0), 1.0)
    raw = (
        100.0
        * thr_term
        * math.exp(-LOSS_DECAY_PER_PCT * loss_pct)
        * math.exp(-JITTER_DECAY_PER_MS * max(0.0, jitter_ms - JITTER_FREE_MS))
    )
    q = raw if prev_qoe is None else SMOOTH_CURRENT * raw + SMOOTH_PREVIOUS * prev_qoe
    return min(max(q, 0.0), 100.0)


@dataclass(frozen=True)
class LinkState:
    """One Markov state: value sub-ranges as fractions of the global envelope."""

    name: str
    loss_frac: tuple[float, float]
    jitter_frac: tuple[float, float]
    throughput_frac: tuple[float, float]


LINK_STATES: dict[str, LinkState] = {
    "good": LinkState("good", (0.00, 0.25), (0.00, 0.35), (0.60, 1.00)),
    "degraded": LinkState("degraded", (0.20, 0.55), (0.30, 0.65), (0.35, 0.75)),
    "handover": LinkState("handover", (0.50, 1.00), (0.55, 1.00), (0.03, 0.30)),
    "congested": LinkState("congested", (0.35, 0.80), (0.70, 1.00), (0.08, 0.40)),
}

# Each episode freezes a base operating point inside its state's sub-ranges;
# ticks wiggle around it by this fraction of the global span. Conditions are
# near-constant within an episode and jump at transitions, which is what
# makes the traces bursty rather than white.
EPISODE_WIGGLE_FRAC = 0.02

# Episode length is uniform in episode_mean_len_s * (1 +- DWELL_JITTER_FRAC),
# so the mean dwell equals episode_mean_len_s exactly while transitions stay
# loosely periodic instead of memoryless.
DWELL_JITTER_FRAC = 0.3

# Relative destination weights when the chain leaves a state. The handover
# state is excluded here: its entry probability is carved out separately so
# that it stays exactly linear in vehicle speed. The cycle bias (good falls to
# degraded, congestion drains through degraded, handover resolves to good)
# gives episodes a recognizable progression instead of memoryless shuffling.
TRANSITION_WEIGHTS: dict[str, dict[str, float]] = {
    "good": {"degraded": 0.85, "congested": 0.15},
    "degraded": {"good": 0.45, "congested": 0.55},
    "handover": {"good": 0.80, "degraded": 0.20},
    "congested": {"degraded": 0.70, "good": 0.30},
}


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for one synthetic trace.

    Ranges are global envelopes; loss is expressed in percent. duration_s
    must cover at least one whole window so a label exists.
    """

    seed: int = 0
    duration_s: int = 600
    tick_s: float = 1.0
    window_s: int = 10
    loss_pct_range: tuple[float, float] = (0.0, 5.0)
    jitter_ms_range: tuple[float, float] = (10.0, 100.0)
    throughput_mbps_range: tuple[float, float] = (5.0, 50.0)
    speed_kmh_range: tuple[float, float] = (0.0, 80.0)
    episode_mean_len_s: float = 30.0
    label_noise_sigma: float = 1.0
    trace_id: str = ""

    def validate(self) -> None:
        if self.duration_s < self.window_s:
            raise InvalidConfig(
                f"duration_s={self.duration_s} shorter than one {self.window_s} s window"
            )
        if self.tick_s <= 0 or self.window_s <= 0:
            raise InvalidConfig("tick_s and window_s must be positive")
        if self.episode_mean_len_s <= self.tick_s:
            raise InvalidConfig("episode_mean_len_s must exceed tick_s")
        if self.label_noise_sigma < 0:
            raise InvalidConfig("label_noise_sigma must be non-negative")
        for name in ("loss_pct_range", "jitter_ms_range", "throughput_mbps_range", "speed_kmh_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(f"{name}: lower bound {lo} above upper bound {hi}")
        if self.loss_pct_range[0] < 0 or self.loss_pct_range[1] > 100:
            raise InvalidConfig("loss_pct_range must stay inside [0, 100]")
        if self.speed_kmh_range[0] < 0:
            raise InvalidConfig("speed_kmh_range must be non-negative")


def transition_row(config: GeneratorConfig, current: str, speed_kmh: float) -> dict[str, float]:
    """Destination distribution when an episode of `current` ends. Sums to 1.

    The handover entry probability is HANDOVER_WEIGHT_AT_REF scaled linearly
    by speed / SPEED_REF_KMH; the rest of the mass goes to the other
    destinations in TRANSITION_WEIGHTS proportion. This is the jump chain of
    the episode process; dwell within a state is handled by _draw_dwell_ticks.
    """
    row = {name: 0.0 for name in STATE_NAMES}

    p_handover = 0.0
    if current != "handover":
        speed_frac = min(max(speed_kmh / SPEED_REF_KMH, 0.0), 1.0)
        p_handover = HANDOVER_WEIGHT_AT_REF * speed_frac
        row["handover"] = p_handover

    weights = TRANSITION_WEIGHTS[current]
    total = sum(weights.values())
    remaining = 1.0 - p_handover
    for name, w in weights.items():
        row[name] += remaining * w / total
    return row


def _draw_dwell_ticks(rng: np.random.Generator, config: GeneratorConfig) -> int:
    lo = config.episode_mean_len_s * (1.0 - DWELL_JITTER_FRAC)
    hi = config.episode_mean_len_s * (1.0 + DWELL_JITTER_FRAC)
    return max(1, int(round(rng.uniform(lo, hi) / config.tick_s)))


def _sub_range(global_range: tuple[float, float], frac: tuple[float, float]) -> tuple[float, float]:
    lo, hi = global_range
    span = hi - lo
    return lo + frac[0] * span, lo + frac[1] * span


@dataclass(frozen=True)
class _EpisodeBase:
    """Operating point a state episode holds: one draw per metric."""

    loss_pct: float
    jitter_ms: float
    throughput_mbps: float


def _draw_base(rng: np.random.Generator, config: GeneratorConfig, state: LinkState) -> _EpisodeBase:
    return _EpisodeBase(
        loss_pct=float(rng.uniform(*_sub_range(config.loss_pct_range, state.loss_frac))),
        jitter_ms=float(rng.uniform(*_sub_range(config.jitter_ms_range, state.jitter_frac))),
        throughput_mbps=float(rng.uniform(*_sub_range(config.throughput_mbps_range, state.throughput_frac))),
    )


def _wiggle(rng: np.random.Generator, base: float, global_range: tuple[float, float],
            sub: tuple[float, float]) -> float:
    lo, hi = global_range
    v = base + rng.normal(0.0, EPISODE_WIGGLE_FRAC * (hi - lo))
    return float(min(max(v, sub[0]), sub[1]))


def _draw_sample(rng: np.random.Generator, config: GeneratorConfig, state: LinkState,
                 base: _EpisodeBase, ts_ms: int, speed: float) -> TelemetrySample:
    loss_pct = _wiggle(rng, base.loss_pct, config.loss_pct_range,
                       _sub_range(config.loss_pct_range, state.loss_frac))
    jitter = _wiggle(rng, base.jitter_ms, config.jitter_ms_range,
                     _sub_range(config.jitter_ms_range, state.jitter_frac))
    thr = _wiggle(rng, base.throughput_mbps, config.throughput_mbps_range,
                  _sub_range(config.throughput_mbps_range, state.throughput_frac))
    loss_rate = loss_pct / 100.0
    # nominal 1000 packets/s link
    loss_count = int(round(loss_rate * 1000.0 * config.tick_s))
    return TelemetrySample(
        ts_ms=ts_ms,
        throughput_mbps=thr,
        jitter_ms=jitter,
        loss_rate=loss_rate,
        loss_count=loss_count,
        speed_kmh=speed,
    )


def _window_means(samples: list[TelemetrySample]) -> tuple[float, float, float]:
    n = len(samples)
    thr = sum(s.throughput_mbps for s in samples) / n
    loss_pct = sum(s.loss_rate for s in samples) / n * 100.0
    jitter = sum(s.jitter_ms for s in samples) / n
    return thr, loss_pct, jitter


def _label_windows(samples: list[TelemetrySample], config: GeneratorConfig,
                   noise_rng: np.random.Generator, start_window: int = 0,
                   prev_qoe: float | None = None) -> list[tuple[int, float]]:
    """Label every whole window from start_window on, chaining the smoother."""
    window_ms = config.window_s * 1000
    by_window: dict[int, list[TelemetrySample]] = {}
    for s in samples:
        by_window.setdefault(s.ts_ms // window_ms, []).append(s)
    expected = round(config.window_s / config.tick_s)
    labels = []
    w = start_window
    while len(by_window.get(w, ())) == expected:
        thr, loss_pct, jitter = _window_means(by_window[w])
        q = qoe_oracle(thr, loss_pct, jitter, prev_qoe)
        if config.label_noise_sigma > 0:
            q += noise_rng.normal(0.0, config.label_noise_sigma)
        q = min(max(q, 0.0), 100.0)
        labels.append((w, q))
        prev_qoe = q
        w += 1
    return labels


def generate_trace(config: GeneratorConfig) -> Trace:
    """Generate one labeled trace, fully determined by config.seed."""
    config.validate()
    n_ticks = int(round(config.duration_s / config.tick_s))
    walk_rng = np.random.default_rng(derive_seed(config.seed, "link-walk"))
    noise_rng = np.random.default_rng(derive_seed(config.seed, "label-noise"))

    speed_lo, speed_hi = config.speed_kmh_range
    speed = float(walk_rng.uniform(speed_lo, speed_hi))
    state = "good"
    base = _draw_base(walk_rng, config, LINK_STATES[state])
    dwell_left = _draw_dwell_ticks(walk_rng, config)
    samples: list[TelemetrySample] = []
    for i in range(n_ticks):
        ts_ms = round(i * config.tick_s * 1000.0)
        samples.append(_draw_sample(walk_rng, config, LINK_STATES[state], base, ts_ms, speed))
        dwell_left -= 1
        if dwell_left <= 0:
            row = transition_row(config, state, speed)
            names = list(row.keys())
            state = str(walk_rng.choice(names, p=[row[n] for n in names]))
            base = _draw_base(walk_rng, config, LINK_STATES[state])
            dwell_left = _draw_dwell_ticks(walk_rng, config)
        speed = float(min(max(speed + walk_rng.normal(0.0, SPEED_WALK_SIGMA_KMH) * config.tick_s,
                              speed_lo), speed_hi))

    labels = _label_windows(samples, config, noise_rng)
    return Trace(
        samples=tuple(samples),
        tick_s=config.tick_s,
        labels=tuple(labels),
        trace_id=config.trace_id or f"synth-{config.seed}",
    )


def inject_episode(trace: Trace, start_s: float, length_s: float, state_name: str,
                   seed: int, config: GeneratorConfig | None = None) -> Trace:
    """Redraw a time span under a forced link state and relabel.

    Samples inside [start_s, start_s + length_s) get fresh impairment draws
    from the forced state's sub-ranges (speed is kept); samples outside the
    span are untouched. Labels from the first overlapped window onward are
    recomputed, because the label smoother chains forward; earlier labels
    are kept verbatim.
    """
    if state_name not in LINK_STATES:
        raise InvalidConfig(f"unknown link state: {state_name}")
    config = config if config is not None else GeneratorConfig(tick_s=trace.tick_s)
    if length_s < 0:
        raise SpanOutOfRange("length_s must be non-negative")
    if start_s < 0 or start_s + length_s > trace.duration_s:
        raise SpanOutOfRange(
            f"span [{start_s}, {start_s + length_s}) outside trace of {trace.duration_s} s"
        )
    if length_s == 0:
        return trace

    rng = np.random.default_rng(derive_seed(seed, "inject"))
    lo_ms, hi_ms = start_s * 1000.0, (start_s + length_s) * 1000.0
    state = LINK_STATES[state_name]
    base = _draw_base(rng, config, state)
    new_samples = []
    for s in trace.samples:
        if lo_ms <= s.ts_ms < hi_ms:
            redrawn = _draw_sample(rng, config, state, base, s.ts_ms, s.speed_kmh)
            new_samples.append(replace(redrawn, qoe=s.qoe))
        else:
            new_samples.append(s)

    window_ms = config.window_s * 1000
    first_affected = int(lo_ms // window_ms)
    kept = tuple((w, q) for w, q in (trace.labels or ()) if w < first_affected)
    prev = kept[-1][1] if kept else None
    noise_rng = np.random.default_rng(derive_seed(seed, "inject-label-noise"))
    recomputed = _label_windows(new_samples, config, noise_rng,
                                start_window=first_affected, prev_qoe=prev)
    return Trace(
        samples=tuple(new_samples),
        tick_s=trace.tick_s,
        labels=kept + tuple(recomputed) if (trace.labels is not None) else None,
        trace_id=trace.trace_id,
    )
