"""Dense float64 tensors with tape-based reverse-mode differentiation.

Primitives compute their forward value eagerly with numpy and, when a Tape
is passed, push a backward closure onto it. backward() replays the closures
in exact reverse recording order; because operations are recorded in
execution order, that reversal is a valid topological order of the graph.
Passing tape=None runs the same math with zero recording overhead, which is
what inference and finite differencing use.

All internal math is 64-bit. Gradients accumulate into Tensor.grad, so a
tensor used several times receives the sum of its downstream contributions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonScalarOutput, ShapeMismatch, TapeConsumed

LAYER_NORM_EPS = 1e-5
ELU_ALPHA = 1.0


class Tensor:
    """A float64 ndarray plus a gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Tape:
    """Ordered record of backward closures for one forward pass.

    A tape is single-use: after backward() it refuses further traversal
    until a fresh forward pass records a new one.
    """

    __slots__ = ("_ops", "_consumed")

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._consumed = False

    def record(self, op: Callable[[], None]) -> None:
        self._ops.append(op)

    def __len__(self):
        return len(self._ops)


def backward(tape: Tape, output: Tensor) -> None:
    """Populate .grad for every tensor that fed the scalar output."""
    if tape._consumed:
        raise TapeConsumed("this tape was already traversed; re-record the forward pass")
    if output.data.size != 1:
        raise NonScalarOutput(f"backward needs a scalar output, got shape {output.data.shape}")
    tape._consumed = True
    output.grad = np.ones_like(output.data)
    for op in reversed(tape._ops):
        op()


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ------------------------------------------------------------- arithmetic

def add(tape: Tape | None, a: Tensor, b) -> Tensor:
    """Elementwise a + b with numpy broadcasting; b may be a constant."""
    bd = _as_array(b)
    try:
        out = Tensor(a.data + bd)
    except ValueError:
        raise ShapeMismatch(f"add: cannot broadcast {a.data.shape} with {bd.shape}") from None
    if tape is not None:
        def _back():
            _accum(a, _reduce_to(out.grad, a.data.shape))
            if isinstance(b, Tensor):
                _accum(b, _reduce_to(out.grad, b.data.shape))
        tape.record(_back)
    return out


def mul(tape: Tape | None, a: Tensor, b) -> Tensor:
    """Elementwise a * b with numpy broadcasting; b may be a constant."""
    bd = _as_array(b)
    try:
        out = Tensor(a.data * bd)
    except ValueError:
        raise ShapeMismatch(f"mul: cannot broadcast {a.data.shape} with {bd.shape}") from None
    if tape is not None:
        ad = a.data
        def _back():
            _accum(a, _reduce_to(out.grad * bd, a.data.shape))
            if isinstance(b, Tensor):
                _accum(b, _reduce_to(out.grad * ad, b.data.shape))
        tape.record(_back)
    return out


def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) operands like np.matmul."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(
            f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    if tape is not None:
        def _back():
            g = out.grad
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(a, _reduce_to(ga, a.data.shape))
            _accum(b, _reduce_to(gb, b.data.shape))
        tape.record(_back)
    return out


# ----------------------------------------------------- structural operations

def concat(tape: Tape | None, parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat of zero tensors")
    try:
        out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    if tape is not None:
        sizes = [p.data.shape[axis] for p in parts]
        def _back():
            offset = 0
            for p, size in zip(parts, sizes):
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(offset, offset + size)
                _accum(p, out.grad[tuple(idx)])
                offset += size
        tape.record(_back)
    return out


def stack(tape: Tape | None, parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeMismatch("stack of zero tensors")
    try:
        out = Tensor(np.stack([p.data for p in parts], axis=axis))
    except ValueError as exc:
        raise ShapeMismatch(f"stack: {exc}") from None
    if tape is not None:
        def _back():
            for i, p in enumerate(parts):
                _accum(p, np.take(out.grad, i, axis=axis))
        tape.record(_back)
    return out


def slice_(tape: Tape | None, x: Tensor, key) -> Tensor:
    """Basic slicing (slices and ints only). Backward scatters into zeros."""
    out = Tensor(x.data[key])
    if tape is not None:
        def _back():
            g = np.zeros_like(x.data)
            g[key] += out.grad
            _accum(x, g)
        tape.record(_back)
    return out


def reshape(tape: Tape | None, x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeMismatch(f"reshape: {x.data.shape} -> {shape}") from None
    if tape is not None:
        def _back():
            _accum(x, out.grad.reshape(x.data.shape))
        tape.record(_back)
    return out


def transpose(tape: Tape | None, x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))
    if tape is not None:
        inverse = tuple(np.argsort(axes))
        def _back():
            _accum(x, np.transpose(out.grad, inverse))
        tape.record(_back)
    return out


# --------------------------------------------------------------- reductions

def reduce_mean(tape: Tape | None, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))
    if tape is not None:
        count = x.data.size if axis is None else x.data.shape[axis]
        def _back():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape) / count)
        tape.record(_back)
    return out


def reduce_sum(tape: Tape | None, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    if tape is not None:
        def _back():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
        tape.record(_back)
    return out


# ------------------------------------------------------------- nonlinearities

def sigmoid(tape: Tape | None, x: Tensor) -> Tensor:
    xd = x.data
    # piecewise form avoids overflow in exp for large |x|
    pos = xd >= 0
    y = np.empty_like(xd)
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    if tape is not None:
        def _back():
            _accum(x, out.grad * y * (1.0 - y))
        tape.record(_back)
    return out


def tanh(tape: Tape | None, x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    if tape is not None:
        def _back():
            _accum(x, out.grad * (1.0 - y * y))
        tape.record(_back)
    return out


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    if tape is not None:
        def _back():
            _accum(x, out.grad * mask)
        tape.record(_back)
    return out


def elu(tape: Tape | None, x: Tensor, alpha: float = ELU_ALPHA) -> Tensor:
    pos = x.data > 0
    expm = alpha * np.expm1(np.minimum(x.data, 0.0))
    y = np.where(pos, x.data, expm)
    out = Tensor(y)
    if tape is not None:
        def _back():
            _accum(x, out.grad * np.where(pos, 1.0, expm + alpha))
        tape.record(_back)
    return out


def softmax(tape: Tape | None, x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)
    if tape is not None:
        def _back():
            g = out.grad
            inner = np.sum(g * y, axis=axis, keepdims=True)
            _accum(x, y * (g - inner))
        tape.record(_back)
    return out


def dropout(tape: Tape | None, x: Tensor, rate: float, train: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Identity (the very same tensor) when train is off."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * scale)
    if tape is not None:
        def _back():
            _accum(x, out.grad * keep * scale)
        tape.record(_back)
    return out


def layer_norm(tape: Tape | None, x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = Tensor(y)
    if tape is not None:
        def _back():
            g = out.grad
            gm = np.mean(g, axis=-1, keepdims=True)
            gy = np.mean(g * y, axis=-1, keepdims=True)
            _accum(x, inv * (g - gm - y * gy))
        tape.record(_back)
    return out


# ------------------------------------------------------------ initialization

@dataclass(frozen=True)
class ParamSpec:
    """Declares one trainable tensor: name, shape, and init family.

    init is one of: glorot (uniform, fan in/out from a 2-D shape),
    orthogonal_blocks (each square block of a (units, gates*units) matrix is
    orthogonal), zeros, ones, lstm_bias (zeros with the forget-gate quarter
    set to one).
    """

    name: str
    shape: tuple[int, ...]
    init: str


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def init_params(specs: Sequence[ParamSpec], seed: int) -> dict[str, np.ndarray]:
    """Materialize parameters in declared order; fully determined by seed."""
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for spec in specs:
        if spec.init == "glorot":
            arr = glorot_uniform(rng, spec.shape)
        elif spec.init == "orthogonal_blocks":
            units, total = spec.shape
            if total % units != 0:
                raise ShapeMismatch(f"{spec.name}: {spec.shape} not block-square")
            blocks = [orthogonal(rng, units) for _ in range(total // units)]
            arr = np.concatenate(blocks, axis=1)
        elif spec.init == "zeros":
            arr = np.zeros(spec.shape)
        elif spec.init == "ones":
            arr = np.ones(spec.shape)
        elif spec.init == "lstm_bias":
            arr = np.zeros(spec.shape)
            units = spec.shape[0] // 4
            arr[units : 2 * units] = 1.0  # forget gate opens the cell early on
        else:
            raise ValueError(f"unknown init family: {spec.init}")
        out[spec.name] = np.asarray(arr, dtype=np.float64)
    return out


# ------------------------------------------------------------ gradient check

@dataclass
class GradientCheckReport:
    max_rel_err: float
    per_tensor: dict[str, float]
    checked_entries: int
    passed: bool
    nonsmooth_entries: int = 0


def gradient_check(
    forward_fn: Callable[[dict[str, Tensor], Tensor, Tape | None], Tensor],
    params: dict[str, np.ndarray],
    inputs: np.ndarray,
    eps: float = 1e-4,
    tol_rel: float = 1e-5,
    max_entries: int | None = 256,
    seed: int = 0,
) -> GradientCheckReport:
    """Compare analytic gradients against central finite differences.

    forward_fn must map (params-as-tensors, input tensor, tape) to a scalar
    Tensor and be deterministic. Tensors larger than max_entries get a
    seeded random subset of coordinates; every checked coordinate is a
    genuine central difference with the given eps. Relative error is
    |a - n| / max(1, |a|, |n|).

    Coordinates where the eps and eps/2 difference quotients disagree beyond
    tol_rel/2 are counted in nonsmooth_entries and excluded: either a kink
    (a relu pre-activation within eps of zero) sits inside the probed
    interval, so the quotient blends one-sided derivatives, or curvature
    exceeds what this eps resolves; in both cases the quotient cannot
    certify the gradient to tol_rel. Smooth coordinates agree to O(eps^2)
    and stay far inside the gate.
    """
    p_tensors = {k: Tensor(v) for k, v in params.items()}
    x_tensor = Tensor(inputs)
    tape = Tape()
    out = forward_fn(p_tensors, x_tensor, tape)
    backward(tape, out)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in p_tensors.items()}
    analytic["__inputs__"] = (x_tensor.grad if x_tensor.grad is not None
                              else np.zeros_like(x_tensor.data))

    work_params = {k: v.copy() for k, v in params.items()}
    work_inputs = np.array(inputs, dtype=np.float64, copy=True)

    def evaluate() -> float:
        pt = {k: Tensor(v) for k, v in work_params.items()}
        return float(forward_fn(pt, Tensor(work_inputs), None).data)

    rng = np.random.default_rng(seed)
    per_tensor: dict[str, float] = {}
    checked = 0
    nonsmooth = 0
    tensors = dict(work_params)
    tensors["__inputs__"] = work_inputs
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        n = flat.size
        if max_entries is None or n <= max_entries:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=max_entries, replace=False)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig + 0.5 * eps
            f_plus_half = evaluate()
            flat[i] = orig - 0.5 * eps
            f_minus_half = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            numeric_half = (f_plus_half - f_minus_half) / eps
            # for a straddled kink the quotient disagreement equals the
            # quotient's own error, so gating at tol/2 leaves nothing
            # larger than tol in the comparison set
            gate = 0.5 * tol_rel * max(1.0, abs(numeric), abs(numeric_half))
            if abs(numeric - numeric_half) > gate:
                nonsmooth += 1
                continue
            a = a_flat[i]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst:
                worst = rel
            checked += 1
        per_tensor[name] = worst
    max_rel = max(per_tensor.values()) if per_tensor else 0.0
    return GradientCheckReport(
        max_rel_err=max_rel,
        per_tensor=per_tensor,
        checked_entries=checked,
        passed=max_rel <= tol_rel,
        nonsmooth_entries=nonsmooth,
    )
