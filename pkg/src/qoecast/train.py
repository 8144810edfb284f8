"""Model fitting: minibatch Adam for the neural zoo, closed-form and
coordinate-descent solvers for the linear variants.

Neural training minimizes log-cosh (or MSE) on scaled targets with seeded
shuffling, early stopping on validation loss with best-weight restore, and
multiplicative learning-rate decay on plateaus. Given the same seed, data
and config, two runs produce bit-identical bundles.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nncore as nc
from .errors import (
    DivergedLoss,
    EmptySplit,
    LengthMismatch,
    NoConvergence,
    SingularSystem,
)
from .nncore import Tape, Tensor
from .pipeline import PreparedDataset
from .seeding import derive_seed
from .zoo import (
    ForecastModel,
    ModelBundle,
    build_variant,
    ALL_VARIANTS,
    save_bundle,
)

_LOG2 = math.log(2.0)


# ------------------------------------------------------------------- losses

def logcosh_value(residuals: np.ndarray) -> float:
    """Mean log(cosh(r)) in the overflow-free form |r| + log1p(e^-2|r|) - log 2."""
    a = np.abs(np.asarray(residuals, dtype=np.float64))
    return float(np.mean(a + np.log1p(np.exp(-2.0 * a)) - _LOG2))


def mse_value(residuals: np.ndarray) -> float:
    r = np.asarray(residuals, dtype=np.float64)
    return float(np.mean(r * r))


def logcosh_loss(tape: Tape | None, pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable mean log-cosh node; d/dpred = tanh(r) / n."""
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise LengthMismatch(f"pred {pred.data.shape} vs target {target.shape}")
    r = pred.data - target
    out = Tensor(logcosh_value(r))
    if tape is not None:
        n = r.size
        def _back():
            nc._accum(pred, out.grad * np.tanh(r) / n)
        tape.record(_back)
    return out


def mse_loss(tape: Tape | None, pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise LengthMismatch(f"pred {pred.data.shape} vs target {target.shape}")
    r = pred.data - target
    out = Tensor(mse_value(r))
    if tape is not None:
        n = r.size
        def _back():
            nc._accum(pred, out.grad * 2.0 * r / n)
        tape.record(_back)
    return out


LOSSES = {"logcosh": (logcosh_loss, logcosh_value), "mse": (mse_loss, mse_value)}


# ------------------------------------------------------------ configuration

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7


@dataclass(frozen=True)
class EarlyStopConfig:
    patience: int = 10
    min_delta: float = 1e-7  # absolute val-loss improvement that counts
    restore_best: bool = True


@dataclass(frozen=True)
class PlateauConfig:
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    max_epochs: int = 200
    loss: str = "logcosh"
    adam: AdamConfig = AdamConfig()
    early_stop: EarlyStopConfig = EarlyStopConfig()
    plateau: PlateauConfig = PlateauConfig()

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; known: {sorted(LOSSES)}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                            repr(r.lr), f"{r.seconds:.4f}"])


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction. A zero (or absent) gradient leaves the
    parameter untouched. lr is mutable so a schedule can decay it."""

    def __init__(self, params: dict[str, Tensor], config: AdamConfig):
        self.params = params
        self.config = config
        self.lr = config.lr
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[k]
            v = self._v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None


# ------------------------------------------------------------ neural training

def train_neural(model: ForecastModel, dataset: PreparedDataset,
                 config: TrainConfig) -> tuple[ModelBundle, TrainHistory]:
    """Fit one neural variant on the dataset's train split, monitoring val.

    Early stopping: stop after `patience` epochs without the val loss
    improving by more than min_delta, then restore the best epoch's weights.
    Plateau schedule: halve the lr (down to min_lr) after its own patience
    of non-improving epochs. All randomness (init, shuffling, dropout) is
    derived from config.seed and the variant id.
    """
    X_train, y_train = dataset.arrays("train")
    X_val, y_val = dataset.arrays("val")
    if len(X_train) == 0 or len(X_val) == 0:
        raise EmptySplit(
            f"train/val must be non-empty, got {len(X_train)}/{len(X_val)}")
    loss_op, loss_val = LOSSES[config.loss]

    params_np = model.init_params(derive_seed(config.seed, f"init:{model.variant_id}"))
    params = {k: Tensor(v) for k, v in params_np.items()}
    opt = Adam(params, config.adam)
    shuffle_rng = np.random.default_rng(
        derive_seed(config.seed, f"shuffle:{model.variant_id}"))

    history = TrainHistory()
    best_val = np.inf
    best_weights = {k: p.data.copy() for k, p in params.items()}
    best_train = np.inf
    es_wait = 0
    plateau_wait = 0
    es = config.early_stop
    pl = config.plateau
    n = len(X_train)

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb, yb = X_train[idx], y_train[idx]
            drop_rng = np.random.default_rng(
                derive_seed(config.seed, f"dropout:{model.variant_id}:{epoch}:{bi}"))
            tape = Tape()
            opt.zero_grads()
            pred, _ = model.forward(params, Tensor(xb), tape, train=True, rng=drop_rng)
            loss = loss_op(tape, pred, yb)
            if not np.isfinite(loss.data):
                raise DivergedLoss(
                    f"{model.variant_id}: non-finite train loss at epoch {epoch}")
            nc.backward(tape, loss)
            opt.step()
            epoch_loss += float(loss.data) * len(idx)
        train_loss = epoch_loss / n

        val_pred, _ = model.forward(params, Tensor(X_val), tape=None, train=False)
        val_loss = loss_val(val_pred.data - y_val)
        if not np.isfinite(val_loss):
            raise DivergedLoss(f"{model.variant_id}: non-finite val loss at epoch {epoch}")
        history.records.append(EpochRecord(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            lr=opt.lr, seconds=time.perf_counter() - t0))

        if best_val - val_loss > es.min_delta:
            best_val = val_loss
            best_train = train_loss
            best_weights = {k: p.data.copy() for k, p in params.items()}
            history.best_epoch = epoch
            es_wait = 0
            plateau_wait = 0
        else:
            es_wait += 1
            plateau_wait += 1
            if plateau_wait >= pl.patience and opt.lr > pl.min_lr:
                opt.lr = max(opt.lr * pl.factor, pl.min_lr)
                plateau_wait = 0
            if es_wait >= es.patience:
                history.stopped_early = True
                break

    if es.restore_best:
        for k, p in params.items():
            p.data = best_weights[k]

    bundle = ModelBundle(
        variant_id=model.variant_id,
        window_s=dataset.window_s,
        context_len=dataset.context_len,
        scaler=dataset.scaler,
        params={k: p.data.astype(np.float32) for k, p in params.items()},
        meta={
            "seed": config.seed,
            "epochs": len(history.records),
            "train_loss": float(best_train),
            "val_loss": float(best_val),
        },
        feature_order=dataset.feature_order,
    )
    return bundle, history


# ------------------------------------------------------------ linear solvers

def solve_ols(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares fit; the minimum-norm solution on rank deficiency."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) != len(y):
        raise LengthMismatch(f"{len(X)} rows vs {len(y)} targets")
    A = np.hstack([X, np.ones((len(X), 1))])
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    return beta[:-1], float(beta[-1])


def solve_ridge(X: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Minimize mean squared error + lam * ||w||^2 with an unpenalized bias.

    The optimal bias is ybar - xbar.w for any w, so the weights come from
    the centered normal equations (Xc'Xc + lam*n*I) w = Xc'yc.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) != len(y):
        raise LengthMismatch(f"{len(X)} rows vs {len(y)} targets")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    n, d = X.shape
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    yc = y - ym
    A = Xc.T @ Xc + lam * n * np.eye(d)
    try:
        w = np.linalg.solve(A, Xc.T @ yc)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"ridge normal equations singular: {exc}") from None
    return w, float(ym - xm @ w)


def solve_coordinate_descent(
    X: np.ndarray,
    y: np.ndarray,
    l1: float,
    l2: float = 0.0,
    tol: float = 1e-7,
    max_sweeps: int = 50_000,
) -> tuple[np.ndarray, float, int]:
    """Cyclic coordinate descent for mean squared error + l1*sum|w| + l2*sum w^2.

    The bias is unpenalized and refit every sweep. Converges when the
    subgradient optimality residual (see kkt_residual) drops below tol;
    coefficient movement is no certificate on ill-conditioned designs,
    where sweeps trade correlated coefficients along a flat valley long
    after the fit is optimal. Returns (weights, bias, sweeps).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) != len(y):
        raise LengthMismatch(f"{len(X)} rows vs {len(y)} targets")
    n, d = X.shape
    w = np.zeros(d)
    b = float(y.mean())
    col_sq = np.einsum("ij,ij->j", X, X)
    denom = (2.0 / n) * col_sq + 2.0 * l2
    r = y - b  # residual y - b - Xw with w = 0

    for sweep in range(1, max_sweeps + 1):
        for j in range(d):
            if denom[j] == 0.0:
                continue  # all-zero column: coefficient stays 0
            old = w[j]
            rho = (2.0 / n) * (X[:, j] @ r + col_sq[j] * old)
            new = np.sign(rho) * max(abs(rho) - l1, 0.0) / denom[j]
            if new != old:
                r -= X[:, j] * (new - old)
                w[j] = new
        b_new = b + float(r.mean())
        if b_new != b:
            r -= b_new - b
            b = b_new
        if kkt_residual(X, y, w, b, l1, l2) <= tol:
            return w, b, sweep
    raise NoConvergence(
        f"coordinate descent did not reach optimality residual {tol} "
        f"in {max_sweeps} sweeps")


def kkt_residual(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float,
                 l1: float, l2: float = 0.0) -> float:
    """Largest violation of the subgradient optimality conditions.

    For each coordinate: |grad_j + l1*sign(w_j)| when w_j != 0, else the
    excess of |grad_j| over l1. The bias condition is a zero mean residual.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    r = y - b - X @ w
    grad = -(2.0 / n) * (X.T @ r) + 2.0 * l2 * w
    worst = abs(2.0 * float(r.mean()))
    for j in range(len(w)):
        if w[j] != 0.0:
            worst = max(worst, abs(grad[j] + l1 * np.sign(w[j])))
        else:
            worst = max(worst, max(0.0, abs(grad[j]) - l1))
    return worst


def fit_linear(variant_id: str, dataset: PreparedDataset,
               config: TrainConfig) -> tuple[ModelBundle, TrainHistory]:
    """Fit one linear variant on the (flattened) train split."""
    model = build_variant(variant_id)
    if model.model_class != "linear":
        raise ValueError(f"{variant_id} is not a linear variant")
    X, y = dataset.arrays("train")
    X_val, y_val = dataset.arrays("val")
    if len(X) == 0:
        raise EmptySplit("train split is empty")
    Xf = X.reshape(len(X), -1)
    l1, l2 = model.penalties
    sweeps = 1
    if l1 == 0.0 and l2 == 0.0:
        w, b = solve_ols(Xf, y)
    elif l1 == 0.0:
        w, b = solve_ridge(Xf, y, l2)
    else:
        w, b, sweeps = solve_coordinate_descent(Xf, y, l1, l2)
    train_loss = mse_value(Xf @ w + b - y)
    val_loss = (mse_value(X_val.reshape(len(X_val), -1) @ w + b - y_val)
                if len(X_val) else float("nan"))

    bundle = ModelBundle(
        variant_id=variant_id,
        window_s=dataset.window_s,
        context_len=dataset.context_len,
        scaler=dataset.scaler,
        params={"weights": w.reshape(-1, 1).astype(np.float32),
                "bias": np.array([b], dtype=np.float32)},
        meta={"seed": config.seed, "epochs": sweeps,
              "train_loss": train_loss, "val_loss": val_loss},
        feature_order=dataset.feature_order,
    )
    history = TrainHistory(records=[EpochRecord(1, train_loss, val_loss,
                                                0.0, 0.0)], best_epoch=1)
    return bundle, history


# ------------------------------------------------------------------ run-all

@dataclass
class VariantOutcome:
    variant_id: str
    status: str  # "ok" or "failed: <reason>"
    bundle: ModelBundle | None
    history: TrainHistory | None


def train_variant(variant_id: str, dataset: PreparedDataset,
                  config: TrainConfig) -> tuple[ModelBundle, TrainHistory]:
    model = build_variant(variant_id)
    if model.model_class == "linear":
        return fit_linear(variant_id, dataset, config)
    return train_neural(model, dataset, config)


def run_all_variants(dataset: PreparedDataset, config: TrainConfig,
                     out_dir: str | Path) -> list[VariantOutcome]:
    """Train every registered variant; write bundles, histories, summary.csv.

    One failing variant is recorded and does not abort the rest. summary.csv
    holds only run-independent values so identical seeds give identical
    bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outcomes: list[VariantOutcome] = []
    for vid in ALL_VARIANTS:
        cfg = replace(config, seed=derive_seed(config.seed, f"variant:{vid}"))
        try:
            bundle, history = train_variant(vid, dataset, cfg)
        except Exception as exc:  # noqa: BLE001 - summary must list the failure
            outcomes.append(VariantOutcome(vid, f"failed: {exc}", None, None))
            continue
        save_bundle(bundle, out / f"{vid}.bundle.json")
        history.write_csv(out / f"{vid}.history.csv")
        outcomes.append(VariantOutcome(vid, "ok", bundle, history))

    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant_id", "status", "epochs", "best_epoch",
                    "train_loss", "val_loss"])
        for o in outcomes:
            if o.bundle is None:
                w.writerow([o.variant_id, o.status, "", "", "", ""])
            else:
                w.writerow([
                    o.variant_id, o.status, o.bundle.meta["epochs"],
                    o.history.best_epoch,
                    repr(float(o.bundle.meta["train_loss"])),
                    repr(float(o.bundle.meta["val_loss"])),
                ])
    return outcomes
