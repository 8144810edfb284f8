import numpy as np
import pytest

from qoecast.errors import (
    InsufficientData,
    NoCompleteWindow,
    TooFewSequences,
    TraceTooShort,
)
from qoecast.pipeline import (
    FEATURE_NAMES,
    QOE_FEATURE,
    ScalerStats,
    build_dataset,
    chrono_split,
    fit_scaler,
    inverse_target,
    load_dataset,
    make_sequences,
    scale_features,
    scale_target,
    scaler_fingerprint,
    save_dataset,
    window_trace,
)
from qoecast.seeding import derive_seed
from qoecast.synthgen import GeneratorConfig, generate_trace, qoe_oracle
from qoecast.telemetry import TelemetrySample, Trace


def _tick(ts_ms, thr=20.0, jit=15.0, loss=0.01, loss_count=10, speed=30.0):
    return TelemetrySample(ts_ms=ts_ms, throughput_mbps=thr, jitter_ms=jit,
                           loss_rate=loss, loss_count=loss_count, speed_kmh=speed)


def _ramp_trace(n_ticks=600, trace_id="ramp"):
    # throughput rises linearly; window w mean is exactly 1.18 + 0.4*w
    samples = tuple(
        _tick(i * 1000, thr=1.0 + 0.04 * i, jit=10.0, loss=0.0, loss_count=0)
        for i in range(n_ticks)
    )
    return Trace(samples=samples, trace_id=trace_id)


def _ramp_qoe_chain(n_windows):
    qs = []
    prev = None
    for w in range(n_windows):
        q = qoe_oracle(1.18 + 0.4 * w, 0.0, 10.0, prev)
        qs.append(q)
        prev = q
    return qs


class TestWindowing:
    def test_full_trace_window_count_and_means(self):
        res = window_trace(_ramp_trace(), window_s=10)
        assert len(res.windows) == 60
        assert res.dropped == []
        for w in res.windows:
            assert w.features[0] == pytest.approx(1.18 + 0.4 * w.window_index, abs=1e-12)
            assert w.features[3] == 0.0  # loss_count sums

    def test_loss_count_sums_over_ticks(self):
        samples = tuple(_tick(i * 1000, loss_count=3) for i in range(20))
        res = window_trace(Trace(samples=samples), window_s=10)
        assert [w.features[3] for w in res.windows] == [30.0, 30.0]

    def test_short_window_dropped_with_reason(self):
        # window 1 keeps only 7 of its 10 ticks: below the 80% floor
        keep = [i for i in range(30) if not (10 <= i < 13)]
        samples = tuple(_tick(i * 1000) for i in keep)
        res = window_trace(Trace(samples=samples), window_s=10)
        assert [w.window_index for w in res.windows] == [0, 2]
        assert res.dropped == [(1, "7/10 ticks")]

    def test_exactly_80_percent_kept(self):
        keep = [i for i in range(10) if i not in (3, 7)]
        res = window_trace(Trace(samples=tuple(_tick(i * 1000) for i in keep)))
        assert [w.window_index for w in res.windows] == [0]

    def test_labels_override_oracle(self):
        samples = tuple(_tick(i * 1000) for i in range(30))
        tr = Trace(samples=samples, labels=((0, 42.0),))
        res = window_trace(tr)
        assert res.windows[0].qoe == 42.0

    def test_oracle_chains_through_previous_kept_window(self):
        samples = tuple(_tick(i * 1000) for i in range(30))
        tr = Trace(samples=samples, labels=((0, 42.0),))
        res = window_trace(tr)
        q1 = qoe_oracle(20.0, 1.0, 15.0, 42.0)
        q2 = qoe_oracle(20.0, 1.0, 15.0, q1)
        assert res.windows[1].qoe == pytest.approx(q1, abs=1e-12)
        assert res.windows[2].qoe == pytest.approx(q2, abs=1e-12)

    def test_oracle_chain_skips_dropped_window(self):
        # window 1 is dropped, so window 2 chains from window 0's qoe
        keep = [i for i in range(30) if not (10 <= i < 15)]
        tr = Trace(samples=tuple(_tick(i * 1000) for i in keep), labels=((0, 42.0),))
        res = window_trace(tr)
        assert res.dropped == [(1, "5/10 ticks")]
        assert res.windows[1].window_index == 2
        assert res.windows[1].qoe == pytest.approx(qoe_oracle(20.0, 1.0, 15.0, 42.0))

    def test_no_complete_window_raises(self):
        samples = tuple(_tick(w * 10000 + k * 1000) for w in range(3) for k in range(4))
        with pytest.raises(NoCompleteWindow):
            window_trace(Trace(samples=samples))

    def test_bad_window_s(self):
        tr = _ramp_trace(60)
        with pytest.raises(ValueError):
            window_trace(tr, window_s=0)


class TestScaler:
    def _windows(self, n=20, seed=0):
        cfg = GeneratorConfig(seed=derive_seed(seed, "trace:0"), duration_s=n * 10)
        return window_trace(generate_trace(cfg)).windows

    def test_fit_records_extremes(self):
        ws = window_trace(_ramp_trace()).windows
        stats = fit_scaler(ws)
        assert stats.mins[0] == pytest.approx(1.18)
        assert stats.maxs[0] == pytest.approx(1.18 + 0.4 * 59)
        assert stats.target_min == stats.mins[QOE_FEATURE]
        assert stats.target_max == stats.maxs[QOE_FEATURE]

    def test_scale_maps_fitted_range_to_unit(self):
        ws = self._windows()
        stats = fit_scaler(ws)
        mat = np.stack([w.features for w in ws])
        scaled = scale_features(stats, mat)
        assert scaled.min(axis=0) == pytest.approx(np.zeros(6), abs=1e-12)
        for j in range(6):
            if not stats.degenerate[j]:
                assert scaled[:, j].max() == pytest.approx(1.0, abs=1e-12)

    def test_scale_does_not_clamp(self):
        ws = self._windows()
        stats = fit_scaler(ws)
        row = ws[0].features.copy()
        row[0] = stats.maxs[0] + (stats.maxs[0] - stats.mins[0])
        assert scale_features(stats, row)[0] == pytest.approx(2.0)

    def test_degenerate_feature_maps_to_zero(self):
        samples = tuple(_tick(i * 1000, jit=25.0) for i in range(40))
        ws = window_trace(Trace(samples=samples)).windows
        stats = fit_scaler(ws)
        assert stats.degenerate[1]
        row = ws[0].features.copy()
        row[1] = 999.0
        assert scale_features(stats, row)[1] == 0.0

    def test_target_round_trip(self, rng):
        ws = self._windows()
        stats = fit_scaler(ws)
        for _ in range(200):
            q = float(rng.uniform(0, 100))
            assert inverse_target(stats, scale_target(stats, q)) == pytest.approx(q, abs=1e-9)

    def test_degenerate_target_inverse_is_constant(self):
        stats = ScalerStats(mins=np.zeros(6), maxs=np.ones(6), target_min=55.0,
                            target_max=55.0, degenerate=np.zeros(6, dtype=bool))
        assert scale_target(stats, 55.0) == 0.0
        assert inverse_target(stats, 0.3) == 55.0

    def test_fingerprint_stable_and_sensitive(self):
        ws = self._windows()
        stats = fit_scaler(ws)
        fp = scaler_fingerprint(stats)
        assert fp == scaler_fingerprint(ScalerStats.from_dict(stats.to_dict()))
        bumped = ScalerStats(mins=stats.mins + 1e-9, maxs=stats.maxs,
                             target_min=stats.target_min, target_max=stats.target_max,
                             degenerate=stats.degenerate)
        assert fp != scaler_fingerprint(bumped)

    def test_too_few_windows(self):
        ws = self._windows()
        with pytest.raises(InsufficientData):
            fit_scaler(ws[:1])


def _scaled_triplet(windows):
    stats = fit_scaler(windows)
    raw = np.stack([w.features for w in windows])
    return stats, scale_features(stats, raw), scale_target(stats, raw[:, QOE_FEATURE])


class TestSequences:
    def test_count_formula(self):
        ws = window_trace(_ramp_trace()).windows
        _, scaled, targets = _scaled_triplet(ws)
        seqs = make_sequences(ws, scaled, targets, "ramp")
        assert len(seqs) == 55  # 60 windows, context 5 + horizon 1

    def test_targets_and_origins(self):
        ws = window_trace(_ramp_trace()).windows
        _, scaled, targets = _scaled_triplet(ws)
        seqs = make_sequences(ws, scaled, targets, "ramp")
        for i, s in enumerate(seqs):
            assert s.origin == ("ramp", i)
            assert s.target == pytest.approx(float(targets[i + 5]), abs=0)
            assert np.array_equal(s.inputs, scaled[i : i + 5])
            assert s.target_ts_ms == (i + 5) * 10000

    def test_sequences_never_span_gaps(self):
        # knock out window 30: runs of 30 and 29 windows remain
        keep = [i for i in range(600) if not (300 <= i < 310)]
        tr = Trace(samples=tuple(_tick(i * 1000, thr=1.0 + 0.04 * i, jit=10.0, loss=0.0)
                                 for i in keep), trace_id="gap")
        ws = window_trace(tr).windows
        assert len(ws) == 59
        _, scaled, targets = _scaled_triplet(ws)
        seqs = make_sequences(ws, scaled, targets, "gap")
        assert len(seqs) == (30 - 5) + (29 - 5)
        for s in seqs:
            first = s.origin[1]
            assert not (first <= 30 <= first + 5)

    def test_trace_too_short(self):
        ws = window_trace(_ramp_trace(50)).windows
        _, scaled, targets = _scaled_triplet(ws)
        with pytest.raises(TraceTooShort):
            make_sequences(ws, scaled, targets, "short")

    def test_misaligned_arrays_rejected(self):
        ws = window_trace(_ramp_trace()).windows
        _, scaled, targets = _scaled_triplet(ws)
        with pytest.raises(ValueError):
            make_sequences(ws, scaled[:-1], targets, "ramp")

    def test_ts_offset_shifts_targets(self):
        ws = window_trace(_ramp_trace()).windows
        _, scaled, targets = _scaled_triplet(ws)
        seqs = make_sequences(ws, scaled, targets, "ramp", ts_offset_ms=600000)
        assert seqs[0].target_ts_ms == 600000 + 5 * 10000


class TestChronoSplit:
    def _seqs(self):
        ws = window_trace(_ramp_trace()).windows
        _, scaled, targets = _scaled_triplet(ws)
        return make_sequences(ws, scaled, targets, "ramp")

    def test_fraction_counts(self):
        split = chrono_split(self._seqs())
        assert (len(split.train), len(split.val), len(split.test)) == (38, 5, 12)

    def test_chronological_order(self):
        seqs = self._seqs()
        # shuffle to prove the split orders by target timestamp itself
        rng = np.random.default_rng(4)
        shuffled = [seqs[i] for i in rng.permutation(len(seqs))]
        split = chrono_split(shuffled)
        ts = [s.target_ts_ms for s in split.train + split.val + split.test]
        assert ts == sorted(ts)
        assert split.train_end_ts_ms <= split.val[0].target_ts_ms
        assert split.val_end_ts_ms <= split.test[0].target_ts_ms

    def test_remainder_goes_to_test(self):
        seqs = self._seqs()[:11]
        split = chrono_split(seqs)
        assert (len(split.train), len(split.val), len(split.test)) == (7, 1, 3)

    def test_too_few_sequences(self):
        with pytest.raises(TooFewSequences):
            chrono_split(self._seqs()[:9])

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            chrono_split(self._seqs(), fractions=(0.5, 0.2, 0.2))


class TestBuildDataset:
    def test_scaler_sees_training_windows_only(self):
        # single ramp trace: train sequences cover windows 0..42, so the
        # fitted max must be window 42's mean, not the global window 59
        ds = build_dataset([_ramp_trace()])
        assert ds.scaler.maxs[0] == pytest.approx(1.18 + 0.4 * 42, abs=1e-9)
        qs = _ramp_qoe_chain(60)
        assert ds.scaler.target_max == pytest.approx(qs[42], abs=1e-9)
        assert ds.scaler.target_min == pytest.approx(qs[0], abs=1e-9)

    def test_leakage_canary_test_targets_exceed_unit(self):
        # qoe keeps rising after the training cut, so honest scaling pushes
        # val and test targets past 1.0; a leaky scaler would cap them at 1
        ds = build_dataset([_ramp_trace()])
        assert all(s.target > 1.0 for s in ds.split.test)
        assert all(0.0 <= s.target <= 1.0 for s in ds.split.train)

    def test_split_counts_and_order(self, small_dataset):
        ds = small_dataset
        total = sum(len(getattr(ds.split, p)) for p in ("train", "val", "test"))
        assert total == 110  # two traces, 55 sequences each
        assert len(ds.split.train) == 77
        ts = [s.target_ts_ms for s in ds.split.train + ds.split.val + ds.split.test]
        assert ts == sorted(ts)

    def test_traces_laid_on_global_timeline(self, small_dataset):
        by_trace = {}
        for part in ("train", "val", "test"):
            for s in getattr(small_dataset.split, part):
                by_trace.setdefault(s.origin[0], []).append(s.target_ts_ms)
        assert max(by_trace["trace_00"]) < min(by_trace["trace_01"])
        assert min(by_trace["trace_01"]) >= 600000

    def test_arrays_shapes(self, small_dataset):
        X, y = small_dataset.arrays("train")
        assert X.shape == (77, 5, 6)
        assert y.shape == (77,)
        assert X.dtype == np.float64

    def test_geometry_overrides(self):
        ds = build_dataset([_ramp_trace()], window_s=5, context=3)
        assert ds.window_s == 5 and ds.context_len == 3
        X, _ = ds.arrays("train")
        assert X.shape[1:] == (3, 6)

    def test_no_traces(self):
        with pytest.raises(InsufficientData):
            build_dataset([])

    def test_too_few_sequences_across_traces(self):
        with pytest.raises(TooFewSequences):
            build_dataset([_ramp_trace(140)])  # 14 windows, 9 sequences

    def test_random_trace_invariants(self):
        # structural invariants on a handful of generated traces
        for seed in range(6):
            cfg = GeneratorConfig(seed=derive_seed(seed, "trace:0"), duration_s=300)
            ds = build_dataset([generate_trace(cfg)])
            n = sum(len(getattr(ds.split, p)) for p in ("train", "val", "test"))
            assert len(ds.split.train) == int(n * 0.7)
            ts = [s.target_ts_ms for s in ds.split.train + ds.split.val + ds.split.test]
            assert ts == sorted(ts)
            Xtr, ytr = ds.arrays("train")
            assert np.all(ytr >= 0.0) and np.all(ytr <= 1.0)
            assert np.all(Xtr >= -1e-12) and np.all(Xtr <= 1.0 + 1e-12)
            for s in ds.split.train:
                assert s.inputs.shape == (5, 6)


class TestDatasetIO:
    def test_round_trip_exact(self, small_dataset, tmp_path):
        save_dataset(small_dataset, tmp_path)
        back = load_dataset(tmp_path)
        assert scaler_fingerprint(back.scaler) == scaler_fingerprint(small_dataset.scaler)
        assert back.window_s == small_dataset.window_s
        assert back.context_len == small_dataset.context_len
        assert back.feature_order == FEATURE_NAMES
        for part in ("train", "val", "test"):
            a, b = getattr(small_dataset.split, part), getattr(back.split, part)
            assert len(a) == len(b)
            for sa, sb in zip(a, b):
                assert np.array_equal(sa.inputs, sb.inputs)
                assert sa.target == sb.target
                assert sa.origin == sb.origin
                assert sa.target_ts_ms == sb.target_ts_ms

    def test_dropped_windows_survive_round_trip(self, tmp_path):
        keep = [i for i in range(600) if not (300 <= i < 303)]
        tr = Trace(samples=tuple(_tick(i * 1000, thr=1.0 + 0.04 * i) for i in keep),
                   trace_id="gap")
        ds = build_dataset([tr, _ramp_trace()])
        assert ("gap", 30, "7/10 ticks") in ds.dropped_windows
        save_dataset(ds, tmp_path)
        assert ("gap", 30, "7/10 ticks") in load_dataset(tmp_path).dropped_windows

    def test_empty_part_arrays(self, small_dataset, tmp_path):
        save_dataset(small_dataset, tmp_path)
        ds = load_dataset(tmp_path)
        ds.split.val = []
        X, y = ds.arrays("val")
        assert X.shape == (0, 5, 6) and y.shape == (0,)
