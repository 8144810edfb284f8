import numpy as np
import pytest

from qoecast.errors import NonScalarOutput, ShapeMismatch, TapeConsumed
from qoecast.nncore import (
    ParamSpec,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    dropout,
    elu,
    glorot_uniform,
    gradient_check,
    init_params,
    layer_norm,
    matmul,
    mul,
    orthogonal,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    slice_,
    softmax,
    stack,
    tanh,
    transpose,
)

EPS = 1e-5
TOL = 1e-6


def _fd_check(fn, *arrays):
    """Backprop through fn and compare every input gradient against a full
    central finite difference. fn(tape, *tensors) must return a scalar."""
    tensors = [Tensor(a) for a in arrays]
    tape = Tape()
    backward(tape, fn(tape, *tensors))
    for t, a in zip(tensors, arrays):
        flat = a.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + EPS
            f_plus = float(fn(None, *[Tensor(x) for x in arrays]).data)
            flat[i] = orig - EPS
            f_minus = float(fn(None, *[Tensor(x) for x in arrays]).data)
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * EPS)
        analytic = (t.grad if t.grad is not None else np.zeros_like(a)).reshape(-1)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        assert err.max() < TOL, f"max rel err {err.max():.3e}"


def _weighted_sum(tape, t, w):
    return reduce_sum(tape, mul(tape, t, w))


class TestPrimitiveGradients:
    def test_add_broadcast(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4,))
        w = rng.standard_normal((3, 4))
        _fd_check(lambda tp, x, y: _weighted_sum(tp, add(tp, x, y), w), a, b)

    def test_add_keepdims_broadcast(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((1, 4))
        w = rng.standard_normal((3, 4))
        tape = Tape()
        ta, tb = Tensor(a), Tensor(b)
        backward(tape, _weighted_sum(tape, add(tape, ta, tb), w))
        assert tb.grad.shape == (1, 4)  # broadcast axes summed, kept dims kept
        _fd_check(lambda tp, x, y: _weighted_sum(tp, add(tp, x, y), w), a, b)

    def test_mul_broadcast(self, rng):
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((3,))
        w = rng.standard_normal((2, 3))
        _fd_check(lambda tp, x, y: _weighted_sum(tp, mul(tp, x, y), w), a, b)

    def test_matmul(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        w = rng.standard_normal((3, 2))
        _fd_check(lambda tp, x, y: _weighted_sum(tp, matmul(tp, x, y), w), a, b)

    def test_matmul_batched_shared_operand(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))  # shared across the batch
        w = rng.standard_normal((2, 3, 5))
        _fd_check(lambda tp, x, y: _weighted_sum(tp, matmul(tp, x, y), w), a, b)

    def test_concat(self, rng):
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 2))
        w = rng.standard_normal((2, 5))
        _fd_check(lambda tp, x, y: _weighted_sum(tp, concat(tp, [x, y], axis=1), w), a, b)

    def test_stack(self, rng):
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 3))
        w = rng.standard_normal((2, 2, 3))
        _fd_check(lambda tp, x, y: _weighted_sum(tp, stack(tp, [x, y], axis=0), w), a, b)

    def test_slice(self, rng):
        a = rng.standard_normal((4, 5))
        w = rng.standard_normal((2, 3))
        _fd_check(lambda tp, x: _weighted_sum(tp, slice_(tp, x, (slice(1, 3), slice(0, 3))), w), a)

    def test_slice_int_key(self, rng):
        a = rng.standard_normal((4, 5))
        w = rng.standard_normal((5,))
        _fd_check(lambda tp, x: _weighted_sum(tp, slice_(tp, x, 2), w), a)

    def test_reshape(self, rng):
        a = rng.standard_normal((3, 4))
        w = rng.standard_normal((2, 6))
        _fd_check(lambda tp, x: _weighted_sum(tp, reshape(tp, x, (2, 6)), w), a)

    def test_transpose(self, rng):
        a = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((3, 4, 2))
        _fd_check(lambda tp, x: _weighted_sum(tp, transpose(tp, x, (1, 2, 0)), w), a)

    def test_reduce_mean_axis(self, rng):
        a = rng.standard_normal((3, 4))
        w = rng.standard_normal((4,))
        _fd_check(lambda tp, x: _weighted_sum(tp, reduce_mean(tp, x, axis=0), w), a)

    def test_reduce_mean_all(self, rng):
        a = rng.standard_normal((3, 4))
        _fd_check(lambda tp, x: reduce_mean(tp, x), a)

    def test_reduce_sum_keepdims(self, rng):
        a = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 1))
        _fd_check(lambda tp, x: _weighted_sum(tp, reduce_sum(tp, x, axis=1, keepdims=True), w), a)

    def test_sigmoid(self, rng):
        a = rng.standard_normal((3, 4)) * 2
        w = rng.standard_normal((3, 4))
        _fd_check(lambda tp, x: _weighted_sum(tp, sigmoid(tp, x), w), a)

    def test_tanh(self, rng):
        a = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))
        _fd_check(lambda tp, x: _weighted_sum(tp, tanh(tp, x), w), a)

    def test_relu_away_from_kink(self, rng):
        a = rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        w = rng.standard_normal((3, 4))
        _fd_check(lambda tp, x: _weighted_sum(tp, relu(tp, x), w), a)

    def test_elu(self, rng):
        a = rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        w = rng.standard_normal((3, 4))
        _fd_check(lambda tp, x: _weighted_sum(tp, elu(tp, x), w), a)

    def test_softmax(self, rng):
        a = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))
        _fd_check(lambda tp, x: _weighted_sum(tp, softmax(tp, x), w), a)

    def test_layer_norm(self, rng):
        a = rng.standard_normal((3, 6)) * 3 + 1
        w = rng.standard_normal((3, 6))
        _fd_check(lambda tp, x: _weighted_sum(tp, layer_norm(tp, x), w), a)

    def test_tensor_reused_twice_accumulates(self, rng):
        a = rng.standard_normal((3, 3))
        _fd_check(lambda tp, x: reduce_sum(tp, mul(tp, x, x)), a)


class TestTapeDiscipline:
    def test_tape_single_use(self):
        x = Tensor([1.0, 2.0])
        tape = Tape()
        out = reduce_sum(tape, x)
        backward(tape, out)
        with pytest.raises(TapeConsumed):
            backward(tape, out)

    def test_non_scalar_output_rejected(self):
        x = Tensor([[1.0, 2.0]])
        tape = Tape()
        out = mul(tape, x, 2.0)
        with pytest.raises(NonScalarOutput):
            backward(tape, out)

    def test_tape_none_records_nothing(self):
        tape = Tape()
        mul(None, Tensor([1.0]), 2.0)
        assert len(tape) == 0
        mul(tape, Tensor([1.0]), 2.0)
        assert len(tape) == 1


class TestShapeErrors:
    def test_matmul_inner_dim(self):
        with pytest.raises(ShapeMismatch):
            matmul(None, Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_matmul_needs_2d(self):
        with pytest.raises(ShapeMismatch):
            matmul(None, Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_add_incompatible(self):
        with pytest.raises(ShapeMismatch):
            add(None, Tensor(np.ones((2, 3))), np.ones((4,)))

    def test_reshape_bad_size(self):
        with pytest.raises(ShapeMismatch):
            reshape(None, Tensor(np.ones((2, 3))), (4, 2))

    def test_concat_empty(self):
        with pytest.raises(ShapeMismatch):
            concat(None, [], axis=0)

    def test_concat_mismatched(self):
        with pytest.raises(ShapeMismatch):
            concat(None, [Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


class TestNonlinearityValues:
    def test_sigmoid_no_overflow(self):
        y = sigmoid(None, Tensor([-1000.0, 0.0, 1000.0])).data
        assert y == pytest.approx([0.0, 0.5, 1.0], abs=1e-12)

    def test_softmax_rows_sum_to_one(self, rng):
        x = Tensor(rng.standard_normal((5, 7)) * 10)
        y = softmax(None, x).data
        assert np.sum(y, axis=-1) == pytest.approx(np.ones(5), abs=1e-12)
        assert np.all(y > 0)

    def test_softmax_shift_invariant(self, rng):
        x = rng.standard_normal((3, 4))
        a = softmax(None, Tensor(x)).data
        b = softmax(None, Tensor(x + 100.0)).data
        assert a == pytest.approx(b, abs=1e-12)

    def test_layer_norm_standardizes(self, rng):
        x = Tensor(rng.standard_normal((4, 8)) * 5 + 3)
        y = layer_norm(None, x).data
        assert np.mean(y, axis=-1) == pytest.approx(np.zeros(4), abs=1e-9)
        assert np.var(y, axis=-1) == pytest.approx(np.ones(4), abs=1e-4)

    def test_elu_continuous_at_zero(self):
        y = elu(None, Tensor([-1e-9, 0.0, 1e-9])).data
        assert abs(y[0] - y[2]) < 1e-8


class TestDropout:
    def test_eval_mode_is_identity_object(self):
        x = Tensor([1.0, 2.0])
        assert dropout(None, x, 0.5, train=False) is x
        assert dropout(None, x, 0.0, train=True) is x

    def test_train_mode_scales_survivors(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.ones(10000))
        y = dropout(None, x, 0.25, train=True, rng=rng).data
        kept = y != 0.0
        assert np.mean(kept) == pytest.approx(0.75, abs=0.02)
        assert np.unique(y[kept]) == pytest.approx([1.0 / 0.75])

    def test_train_mode_needs_rng(self):
        with pytest.raises(ValueError):
            dropout(None, Tensor([1.0]), 0.5, train=True)

    def test_rate_validated(self):
        with pytest.raises(ValueError):
            dropout(None, Tensor([1.0]), 1.0, train=True, rng=np.random.default_rng(0))

    def test_backward_matches_mask(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.ones(64))
        tape = Tape()
        y = dropout(tape, x, 0.5, train=True, rng=rng)
        mask = (y.data != 0.0).astype(float)
        backward(tape, reduce_sum(tape, y))
        assert x.grad == pytest.approx(mask * 2.0)


class TestInit:
    def test_glorot_bounds(self):
        rng = np.random.default_rng(0)
        arr = glorot_uniform(rng, (30, 20))
        limit = np.sqrt(6.0 / 50)
        assert np.all(np.abs(arr) <= limit)
        assert np.abs(arr).max() > 0.8 * limit  # actually fills the range

    def test_orthogonal_is_orthogonal(self):
        for seed in range(5):
            q = orthogonal(np.random.default_rng(seed), 16)
            assert q.T @ q == pytest.approx(np.eye(16), abs=1e-10)

    def test_orthogonal_blocks(self):
        params = init_params([ParamSpec("r", (8, 24), "orthogonal_blocks")], seed=3)
        r = params["r"]
        for k in range(3):
            blk = r[:, 8 * k : 8 * (k + 1)]
            assert blk.T @ blk == pytest.approx(np.eye(8), abs=1e-10)

    def test_orthogonal_blocks_shape_checked(self):
        with pytest.raises(ShapeMismatch):
            init_params([ParamSpec("r", (8, 20), "orthogonal_blocks")], seed=0)

    def test_lstm_bias_opens_forget_gate(self):
        params = init_params([ParamSpec("b", (16,), "lstm_bias")], seed=0)
        b = params["b"]
        assert np.all(b[4:8] == 1.0)
        assert np.all(b[:4] == 0.0) and np.all(b[8:] == 0.0)

    def test_zeros_and_ones(self):
        params = init_params([ParamSpec("z", (3,), "zeros"), ParamSpec("o", (3,), "ones")], seed=0)
        assert np.all(params["z"] == 0.0) and np.all(params["o"] == 1.0)

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            init_params([ParamSpec("x", (2, 2), "gaussian")], seed=0)

    def test_deterministic_per_seed(self):
        specs = [ParamSpec("w", (6, 8), "glorot"), ParamSpec("r", (8, 16), "orthogonal_blocks")]
        a = init_params(specs, seed=11)
        b = init_params(specs, seed=11)
        c = init_params(specs, seed=12)
        for k in a:
            assert np.array_equal(a[k], b[k])
        assert not np.array_equal(a["w"], c["w"])


class TestGradientCheck:
    @staticmethod
    def _linear(params, x, tape):
        h = matmul(tape, x, params["w"])
        h = add(tape, h, params["b"])
        return reduce_mean(tape, tanh(tape, h))

    def test_correct_model_passes(self, rng):
        params = {"w": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)}
        rep = gradient_check(self._linear, params, rng.standard_normal((5, 4)))
        assert rep.passed
        assert rep.max_rel_err < 1e-7
        assert set(rep.per_tensor) == {"w", "b", "__inputs__"}

    def test_broken_gradient_caught(self, rng):
        # forward value is doubled after recording, so the taped gradient
        # disagrees with finite differences by a factor of two
        def bad(params, x, tape):
            y = mul(tape, params["w"], 3.0)
            y.data = y.data * 2.0
            return reduce_sum(tape, y)

        rep = gradient_check(bad, {"w": rng.standard_normal(4)}, np.zeros(1))
        assert not rep.passed
        assert rep.max_rel_err > 0.4

    def test_subset_counts(self, rng):
        params = {"w": rng.standard_normal((10, 10))}
        rep = gradient_check(
            lambda p, x, tape: reduce_mean(tape, matmul(tape, x, p["w"])),
            params, rng.standard_normal((2, 10)), max_entries=7)
        assert rep.checked_entries == 7 + 7  # both tensors subsampled
