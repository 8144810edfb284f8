"""Prediction explanations: integrated gradients, attention maps, and a
local linear surrogate.

All methods work on one scaled (5, 6) context. Attributions are reported
per (window, feature) cell in prediction units; for integrated gradients
the cells sum to the prediction difference against the baseline up to a
reported completeness gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nc
from .errors import (
    DegeneratePerturbations,
    NoAttentionComponent,
    NonDifferentiableModel,
    ShapeMismatch,
)
from .nncore import Tape, Tensor
from .pipeline import FEATURE_NAMES
from .zoo import ModelBundle, build_variant

IG_STEPS = 64
LIME_SAMPLES = 500
LIME_SIGMA = 0.1
LIME_KERNEL_WIDTH = 0.75
LIME_RIDGE = 1e-3


def _check_input(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    expected = (bundle.context_len, len(bundle.feature_order))
    if x.shape != expected:
        raise ShapeMismatch(f"expected input shape {expected}, got {x.shape}")
    return x


def _params64(bundle: ModelBundle) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in bundle.params.items()}


@dataclass
class Attribution:
    """Per-cell attribution of one prediction against a baseline input."""

    variant_id: str
    method: str
    values: np.ndarray  # (5, 6)
    prediction: float
    baseline_prediction: float
    completeness_gap: float
    steps: int

    def top_k(self, k: int = 3) -> list[tuple[int, str, float]]:
        """Largest |attribution| cells as (window, feature_name, value)."""
        flat = np.argsort(-np.abs(self.values), axis=None)[:k]
        out = []
        for idx in flat:
            w, f = divmod(int(idx), self.values.shape[1])
            out.append((w, FEATURE_NAMES[f], float(self.values[w, f])))
        return out


def integrated_gradients(bundle: ModelBundle, x: np.ndarray,
                         baseline: np.ndarray | None = None,
                         steps: int = IG_STEPS) -> Attribution:
    """Path-integrated input gradients from a baseline to x.

    The integral is evaluated with the midpoint rule at (k - 0.5)/steps,
    k = 1..steps; attributions are the averaged gradients times (x - x').
    Linear variants short-circuit to the exact closed form w * (x - x'),
    whose completeness gap is zero by construction. The default baseline is
    the all-zero scaled input (the training-window minima).
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    x = _check_input(bundle, x)
    baseline = (np.zeros_like(x) if baseline is None
                else _check_input(bundle, baseline))
    model = build_variant(bundle.variant_id)
    params = _params64(bundle)
    diff = x - baseline

    both, _ = model.forward(params, Tensor(np.stack([x, baseline])), tape=None)
    pred, base_pred = float(both.data[0]), float(both.data[1])

    if model.model_class == "linear":
        w = np.asarray(bundle.params["weights"], dtype=np.float64).reshape(x.shape)
        values = w * diff
        gap = abs(float(values.sum()) - (pred - base_pred))
        return Attribution(bundle.variant_id, "integrated_gradients_exact",
                           values, pred, base_pred, gap, steps=1)

    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    points = baseline[None, :, :] + alphas[:, None, None] * diff[None, :, :]
    tape = Tape()
    xt = Tensor(points)
    out, _ = model.forward(params, xt, tape, train=False)
    if out.data.ndim != 1:
        raise NonDifferentiableModel(
            f"{bundle.variant_id}: forward pass is not scalar per row")
    total = nc.reduce_sum(tape, out)
    nc.backward(tape, total)
    avg_grad = xt.grad.mean(axis=0)
    values = avg_grad * diff
    gap = abs(float(values.sum()) - (pred - base_pred))
    return Attribution(bundle.variant_id, "integrated_gradients",
                       values, pred, base_pred, gap, steps=steps)


@dataclass
class AttentionMap:
    """Attention side-output of one forward pass.

    Recurrent models give one weight per context window (5,); the
    transformer gives per-head position-to-position maps (heads, 5, 5).
    Rows sum to one; requesting the map never changes the prediction.
    """

    variant_id: str
    weights: np.ndarray
    prediction: float


def attention_map(bundle: ModelBundle, x: np.ndarray) -> AttentionMap:
    x = _check_input(bundle, x)
    model = build_variant(bundle.variant_id)
    if not model.has_attention:
        raise NoAttentionComponent(
            f"{bundle.variant_id} ({model.model_class}) has no attention weights")
    pred, aux = model.forward(_params64(bundle), Tensor(x[None]), tape=None)
    weights = aux["attention"][0]
    return AttentionMap(bundle.variant_id, weights, float(pred.data[0]))


@dataclass
class LocalSurrogate:
    """Weighted ridge fit around one input: a LIME-style local explanation."""

    variant_id: str
    coefficients: np.ndarray  # (30,) flattened (window, feature) order
    intercept: float
    r_squared: float
    n_samples: int
    kernel_width: float

    def cell_coefficients(self) -> np.ndarray:
        return self.coefficients.reshape(-1, len(FEATURE_NAMES))


def lime_local(bundle: ModelBundle, x: np.ndarray, n_samples: int = LIME_SAMPLES,
               sigma: float = LIME_SIGMA, kernel_width: float = LIME_KERNEL_WIDTH,
               seed: int = 0, ridge: float = LIME_RIDGE) -> LocalSurrogate:
    """Fit a distance-weighted linear surrogate to the model around x.

    Perturbations add Gaussian noise (scale sigma) to every flattened scalar;
    sample weights decay as exp(-d^2 / kernel_width^2) in the distance from
    x. The surrogate is ridge-regularized and scored by weighted R^2.
    """
    if sigma <= 0:
        raise DegeneratePerturbations("sigma must be positive to perturb the input")
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    x = _check_input(bundle, x)
    model = build_variant(bundle.variant_id)
    params = _params64(bundle)
    rng = np.random.default_rng(seed)

    flat = x.reshape(-1)
    d = flat.size
    Z = flat[None, :] + rng.normal(0.0, sigma, size=(n_samples, d))
    preds, _ = model.forward(params, Tensor(Z.reshape(n_samples, *x.shape)), tape=None)
    y = preds.data

    dist2 = np.sum((Z - flat[None, :]) ** 2, axis=1)
    weights = np.exp(-dist2 / (kernel_width ** 2))

    # weighted ridge with unpenalized intercept, solved on centered data
    wsum = weights.sum()
    zm = (weights @ Z) / wsum
    ym = float(weights @ y) / wsum
    Zc = Z - zm
    yc = y - ym
    A = (Zc * weights[:, None]).T @ Zc + ridge * np.eye(d)
    coef = np.linalg.solve(A, (Zc * weights[:, None]).T @ yc)
    intercept = ym - float(zm @ coef)

    fitted = Z @ coef + intercept
    ss_res = float(weights @ ((y - fitted) ** 2))
    ss_tot = float(weights @ ((y - ym) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return LocalSurrogate(
        variant_id=bundle.variant_id,
        coefficients=coef,
        intercept=intercept,
        r_squared=r2,
        n_samples=n_samples,
        kernel_width=kernel_width,
    )
