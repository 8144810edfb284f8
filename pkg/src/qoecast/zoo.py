"""Forecasting model zoo: 18 variants behind one forward interface.

Families: recurrent (GRU/LSTM with additive attention over the 5 hidden
states), a single-block Transformer encoder, plain feed-forward nets on the
flattened context, and linear regressors. Every model maps a scaled
(batch, 5, 6) context to one scaled QoE prediction per row and exposes its
attention weights, when it has any, as a side output that never influences
the prediction.

Trained weights travel as a ModelBundle: a JSON document holding the
architecture id, the windowing geometry, the scaler, 32-bit parameters and
a CRC-32 over their canonical serialization.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import nncore as nc
from .errors import ChecksumMismatch, ShapeMismatch, UnknownVariant, VersionMismatch
from .nncore import ParamSpec, Tape, Tensor
from .pipeline import FEATURE_NAMES, N_FEATURES, QOE_FEATURE, ScalerStats

CONTEXT_LEN = 5
ATTENTION_WIDTH = 128
D_MODEL = 32
BUNDLE_FORMAT_VERSION = 1


def _dense_specs(name: str, n_in: int, n_out: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{name}_kernel", (n_in, n_out), "glorot"),
        ParamSpec(f"{name}_bias", (n_out,), "zeros"),
    ]


def _dense(tape, params, name: str, x: Tensor) -> Tensor:
    return nc.add(tape, nc.matmul(tape, x, params[f"{name}_kernel"]), params[f"{name}_bias"])


class ForecastModel:
    """Shared surface: param specs, seeded init, forward to (pred, aux)."""

    variant_id: str
    model_class: str
    has_attention: bool = False
    context_len: int = CONTEXT_LEN
    n_features: int = N_FEATURES

    def __init__(self, variant_id: str):
        self.variant_id = variant_id
        self.param_specs: tuple[ParamSpec, ...] = tuple(self._build_specs())

    def _build_specs(self) -> list[ParamSpec]:
        raise NotImplementedError

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        return nc.init_params(self.param_specs, seed)

    def param_count(self) -> int:
        return int(sum(int(np.prod(s.shape)) for s in self.param_specs))

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 3 or x.data.shape[1:] != (self.context_len, self.n_features):
            raise ShapeMismatch(
                f"{self.variant_id}: expected (batch, {self.context_len}, "
                f"{self.n_features}) input, got {x.data.shape}")

    def forward(self, params: Mapping[str, Tensor], x: Tensor, tape: Tape | None = None,
                train: bool = False, rng: np.random.Generator | None = None):
        raise NotImplementedError


# ----------------------------------------------------------- recurrent nets

class RecurrentModel(ForecastModel):
    """Stacked GRU or LSTM layers, additive attention, dense head.

    Gate layout per layer: one input kernel (d_in, G*units), one recurrent
    kernel (units, G*units) with orthogonal square blocks, one bias (G*units).
    GRU order z|r|h with the reset gate applied before the candidate's
    recurrent matmul; LSTM order i|f|g|o with the forget bias initialized
    to 1. Dropout, when configured, acts on the sequence between layers
    during training only.
    """

    has_attention = True

    def __init__(self, variant_id: str, cell: str, layer_units: tuple[int, ...],
                 dropout_rate: float = 0.0):
        self.cell = cell
        self.layer_units = layer_units
        self.dropout_rate = dropout_rate
        self.model_class = cell
        self._gates = 3 if cell == "gru" else 4
        super().__init__(variant_id)

    def _build_specs(self) -> list[ParamSpec]:
        specs: list[ParamSpec] = []
        d_in = self.n_features
        bias_init = "zeros" if self.cell == "gru" else "lstm_bias"
        for li, units in enumerate(self.layer_units):
            g = self._gates
            specs.append(ParamSpec(f"{self.cell}{li}_kernel", (d_in, g * units), "glorot"))
            specs.append(ParamSpec(f"{self.cell}{li}_recurrent", (units, g * units),
                                   "orthogonal_blocks"))
            specs.append(ParamSpec(f"{self.cell}{li}_bias", (g * units,), bias_init))
            d_in = units
        top = self.layer_units[-1]
        specs.append(ParamSpec("att_kernel", (top, ATTENTION_WIDTH), "glorot"))
        specs.append(ParamSpec("att_bias", (ATTENTION_WIDTH,), "zeros"))
        specs.append(ParamSpec("att_score", (ATTENTION_WIDTH, 1), "glorot"))
        specs.extend(_dense_specs("out", top, 1))
        return specs

    def _gru_layer(self, tape, params, li: int, x: Tensor, units: int) -> list[Tensor]:
        B, T = x.data.shape[0], x.data.shape[1]
        u = units
        gx_all = nc.add(tape, nc.matmul(tape, x, params[f"gru{li}_kernel"]),
                        params[f"gru{li}_bias"])
        U = params[f"gru{li}_recurrent"]
        U_zr = nc.slice_(tape, U, (slice(None), slice(0, 2 * u)))
        U_h = nc.slice_(tape, U, (slice(None), slice(2 * u, 3 * u)))
        h = Tensor(np.zeros((B, u)))
        states = []
        for t in range(T):
            gx = nc.slice_(tape, gx_all, (slice(None), t))
            rec = nc.matmul(tape, h, U_zr)
            z = nc.sigmoid(tape, nc.add(
                tape,
                nc.slice_(tape, gx, (slice(None), slice(0, u))),
                nc.slice_(tape, rec, (slice(None), slice(0, u)))))
            r = nc.sigmoid(tape, nc.add(
                tape,
                nc.slice_(tape, gx, (slice(None), slice(u, 2 * u))),
                nc.slice_(tape, rec, (slice(None), slice(u, 2 * u)))))
            cand = nc.tanh(tape, nc.add(
                tape,
                nc.slice_(tape, gx, (slice(None), slice(2 * u, 3 * u))),
                nc.matmul(tape, nc.mul(tape, r, h), U_h)))
            # h' = (1 - z) * h + z * cand, written as h + z * (cand - h)
            delta = nc.add(tape, cand, nc.mul(tape, h, -1.0))
            h = nc.add(tape, h, nc.mul(tape, z, delta))
            states.append(h)
        return states

    def _lstm_layer(self, tape, params, li: int, x: Tensor, units: int) -> list[Tensor]:
        B, T = x.data.shape[0], x.data.shape[1]
        u = units
        gx_all = nc.add(tape, nc.matmul(tape, x, params[f"lstm{li}_kernel"]),
                        params[f"lstm{li}_bias"])
        U = params[f"lstm{li}_recurrent"]
        h = Tensor(np.zeros((B, u)))
        c = Tensor(np.zeros((B, u)))
        states = []
        for t in range(T):
            gates = nc.add(tape, nc.slice_(tape, gx_all, (slice(None), t)),
                           nc.matmul(tape, h, U))
            i = nc.sigmoid(tape, nc.slice_(tape, gates, (slice(None), slice(0, u))))
            f = nc.sigmoid(tape, nc.slice_(tape, gates, (slice(None), slice(u, 2 * u))))
            g = nc.tanh(tape, nc.slice_(tape, gates, (slice(None), slice(2 * u, 3 * u))))
            o = nc.sigmoid(tape, nc.slice_(tape, gates, (slice(None), slice(3 * u, 4 * u))))
            c = nc.add(tape, nc.mul(tape, f, c), nc.mul(tape, i, g))
            h = nc.mul(tape, o, nc.tanh(tape, c))
            states.append(h)
        return states

    def forward(self, params, x, tape=None, train=False, rng=None):
        self._check_input(x)
        seq = x
        layer = self._gru_layer if self.cell == "gru" else self._lstm_layer
        states: list[Tensor] = []
        for li, units in enumerate(self.layer_units):
            states = layer(tape, params, li, seq, units)
            seq = nc.stack(tape, states, axis=1)
            if li < len(self.layer_units) - 1 and self.dropout_rate > 0.0:
                seq = nc.dropout(tape, seq, self.dropout_rate, train, rng)

        # additive attention: score_t = v . tanh(W h_t + b), softmax over t
        e = nc.tanh(tape, nc.add(tape, nc.matmul(tape, seq, params["att_kernel"]),
                                 params["att_bias"]))
        scores = nc.matmul(tape, e, params["att_score"])
        B, T = x.data.shape[0], x.data.shape[1]
        alpha = nc.softmax(tape, nc.reshape(tape, scores, (B, T)), axis=1)
        ctx = nc.matmul(tape, nc.reshape(tape, alpha, (B, 1, T)), seq)
        ctx = nc.reshape(tape, ctx, (B, self.layer_units[-1]))
        pred = nc.reshape(tape, _dense(tape, params, "out", ctx), (B,))
        return pred, {"attention": alpha.data.copy()}


# -------------------------------------------------------------- transformer

def sinusoidal_positions(n_pos: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table, (n_pos, d_model)."""
    pos = np.arange(n_pos)[:, None].astype(np.float64)
    i = np.arange(d_model // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.zeros((n_pos, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class TransformerModel(ForecastModel):
    """One post-norm encoder block over the 5 projected positions.

    Input projection to d_model=32 plus fixed sinusoidal position codes;
    multi-head self-attention, residual + layer norm (learned gain/shift),
    position-wise FFN with ReLU, second residual + norm; mean pooling over
    positions and a dense head. Dropout acts on each sublayer output during
    training.
    """

    model_class = "transformer"
    has_attention = True

    def __init__(self, variant_id: str, heads: int = 2, ff_dim: int = 64,
                 dropout_rate: float = 0.10, d_model: int = D_MODEL):
        if d_model % heads != 0:
            raise ShapeMismatch(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.ff_dim = ff_dim
        self.dropout_rate = dropout_rate
        self.d_model = d_model
        self.head_dim = d_model // heads
        self._pe = sinusoidal_positions(CONTEXT_LEN, d_model)
        super().__init__(variant_id)

    def _build_specs(self) -> list[ParamSpec]:
        d = self.d_model
        specs = _dense_specs("embed", self.n_features, d)
        for name in ("wq", "wk", "wv", "wo"):
            specs.extend(_dense_specs(name, d, d))
        specs.append(ParamSpec("ln1_gamma", (d,), "ones"))
        specs.append(ParamSpec("ln1_beta", (d,), "zeros"))
        specs.extend(_dense_specs("ffn1", d, self.ff_dim))
        specs.extend(_dense_specs("ffn2", self.ff_dim, d))
        specs.append(ParamSpec("ln2_gamma", (d,), "ones"))
        specs.append(ParamSpec("ln2_beta", (d,), "zeros"))
        specs.extend(_dense_specs("out", d, 1))
        return specs

    def _split_heads(self, tape, t: Tensor, B: int, T: int) -> Tensor:
        t = nc.reshape(tape, t, (B, T, self.heads, self.head_dim))
        t = nc.transpose(tape, t, (0, 2, 1, 3))
        return nc.reshape(tape, t, (B * self.heads, T, self.head_dim))

    def forward(self, params, x, tape=None, train=False, rng=None):
        self._check_input(x)
        B, T = x.data.shape[0], x.data.shape[1]
        h = nc.add(tape, _dense(tape, params, "embed", x), self._pe)

        q = self._split_heads(tape, _dense(tape, params, "wq", h), B, T)
        k = self._split_heads(tape, _dense(tape, params, "wk", h), B, T)
        v = self._split_heads(tape, _dense(tape, params, "wv", h), B, T)
        scores = nc.mul(tape, nc.matmul(tape, q, nc.transpose(tape, k, (0, 2, 1))),
                        1.0 / np.sqrt(self.head_dim))
        weights = nc.softmax(tape, scores, axis=2)
        att = nc.matmul(tape, weights, v)
        att = nc.reshape(tape, att, (B, self.heads, T, self.head_dim))
        att = nc.transpose(tape, att, (0, 2, 1, 3))
        att = nc.reshape(tape, att, (B, T, self.d_model))
        att = _dense(tape, params, "wo", att)
        att = nc.dropout(tape, att, self.dropout_rate, train, rng)

        h = nc.add(tape, h, att)
        h = nc.add(tape, nc.mul(tape, nc.layer_norm(tape, h), params["ln1_gamma"]),
                   params["ln1_beta"])

        ff = _dense(tape, params, "ffn2", nc.relu(tape, _dense(tape, params, "ffn1", h)))
        ff = nc.dropout(tape, ff, self.dropout_rate, train, rng)
        h = nc.add(tape, h, ff)
        h = nc.add(tape, nc.mul(tape, nc.layer_norm(tape, h), params["ln2_gamma"]),
                   params["ln2_beta"])

        pooled = nc.reduce_mean(tape, h, axis=1)
        pred = nc.reshape(tape, _dense(tape, params, "out", pooled), (B,))
        attention = weights.data.reshape(B, self.heads, T, T).copy()
        return pred, {"attention": attention}


# ------------------------------------------------------------ feed-forward

class DnnModel(ForecastModel):
    """Dense net on the flattened 30-value context."""

    model_class = "dnn"

    def __init__(self, variant_id: str, hidden: tuple[int, ...],
                 activation: str = "relu", dropout_rate: float = 0.2):
        self.hidden = hidden
        self.activation = activation
        self.dropout_rate = dropout_rate
        super().__init__(variant_id)

    def _build_specs(self) -> list[ParamSpec]:
        specs: list[ParamSpec] = []
        d_in = self.context_len * self.n_features
        for i, width in enumerate(self.hidden):
            specs.extend(_dense_specs(f"dense{i}", d_in, width))
            d_in = width
        specs.extend(_dense_specs("out", d_in, 1))
        return specs

    def forward(self, params, x, tape=None, train=False, rng=None):
        self._check_input(x)
        B = x.data.shape[0]
        act = nc.relu if self.activation == "relu" else nc.elu
        h = nc.reshape(tape, x, (B, self.context_len * self.n_features))
        for i in range(len(self.hidden)):
            h = act(tape, _dense(tape, params, f"dense{i}", h))
            h = nc.dropout(tape, h, self.dropout_rate, train, rng)
        pred = nc.reshape(tape, _dense(tape, params, "out", h), (B,))
        return pred, {}


class LinearModel(ForecastModel):
    """Affine map on the flattened context. penalties = (l1, l2) strengths
    consumed by the fitting routine; the forward pass is the same for all
    four variants."""

    model_class = "linear"

    def __init__(self, variant_id: str, penalties: tuple[float, float] = (0.0, 0.0)):
        self.penalties = penalties
        super().__init__(variant_id)

    def _build_specs(self) -> list[ParamSpec]:
        d_in = self.context_len * self.n_features
        return [ParamSpec("weights", (d_in, 1), "glorot"),
                ParamSpec("bias", (1,), "zeros")]

    def forward(self, params, x, tape=None, train=False, rng=None):
        self._check_input(x)
        B = x.data.shape[0]
        flat = nc.reshape(tape, x, (B, self.context_len * self.n_features))
        out = nc.add(tape, nc.matmul(tape, flat, params["weights"]), params["bias"])
        return nc.reshape(tape, out, (B,)), {}


# ----------------------------------------------------------------- registry

def _registry() -> dict[str, ForecastModel]:
    models = [
        RecurrentModel("lstm_basic", "lstm", (32,)),
        RecurrentModel("lstm_wide", "lstm", (100,)),
        RecurrentModel("lstm_deep", "lstm", (32, 32, 32), dropout_rate=0.2),
        RecurrentModel("gru_basic", "gru", (32,)),
        RecurrentModel("gru_wide", "gru", (64,)),
        RecurrentModel("gru_deep", "gru", (32, 32, 32), dropout_rate=0.20),
        TransformerModel("tr_basic", heads=2, ff_dim=64, dropout_rate=0.10),
        TransformerModel("tr_4heads", heads=4, ff_dim=64, dropout_rate=0.10),
        TransformerModel("tr_largeff", heads=2, ff_dim=128, dropout_rate=0.10),
        TransformerModel("tr_lowdrop", heads=2, ff_dim=64, dropout_rate=0.05),
        DnnModel("dnn_basic", (64, 32), "relu", 0.2),
        DnnModel("dnn_deep", (128, 64, 32), "relu", 0.2),
        DnnModel("dnn_elu", (64, 32), "elu", 0.2),
        DnnModel("dnn_highdrop", (64, 32), "relu", 0.4),
        LinearModel("lin_basic", (0.0, 0.0)),
        LinearModel("lin_l1", (0.01, 0.0)),
        LinearModel("lin_l2", (0.0, 0.01)),
        LinearModel("lin_elasticnet", (0.005, 0.005)),
    ]
    return {m.variant_id: m for m in models}


_MODELS = _registry()
ALL_VARIANTS: tuple[str, ...] = tuple(_MODELS)
NEURAL_VARIANTS: tuple[str, ...] = tuple(v for v in ALL_VARIANTS
                                         if _MODELS[v].model_class != "linear")
LINEAR_VARIANTS: tuple[str, ...] = tuple(v for v in ALL_VARIANTS
                                         if _MODELS[v].model_class == "linear")


def build_variant(variant_id: str) -> ForecastModel:
    if variant_id not in _MODELS:
        raise UnknownVariant(
            f"unknown variant {variant_id!r}; known: {', '.join(ALL_VARIANTS)}")
    return _MODELS[variant_id]


def model_class_of(variant_id: str) -> str:
    return build_variant(variant_id).model_class


def last_value_baseline(batch: np.ndarray) -> np.ndarray:
    """Predict the last context window's (scaled) QoE unchanged."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[2] != N_FEATURES:
        raise ShapeMismatch(f"expected (batch, context, {N_FEATURES}), got {batch.shape}")
    return batch[:, -1, QOE_FEATURE].copy()


# ------------------------------------------------------------------ bundles

@dataclass
class ModelBundle:
    """Portable trained model: weights at 32-bit plus everything needed to
    reproduce its inputs (scaler, geometry, feature order)."""

    variant_id: str
    window_s: int
    context_len: int
    scaler: ScalerStats
    params: dict[str, np.ndarray]  # float32, model spec order
    meta: dict
    feature_order: tuple[str, ...] = FEATURE_NAMES
    format_version: int = BUNDLE_FORMAT_VERSION


def params_checksum(params: Mapping[str, np.ndarray]) -> int:
    """CRC-32 over the canonical little-endian float32 bytes of the params
    section, names and shapes included, in listed order."""
    crc = 0
    for name, arr in params.items():
        a32 = np.ascontiguousarray(arr, dtype="<f4")
        crc = zlib.crc32(name.encode("utf-8"), crc)
        crc = zlib.crc32(b"\x00", crc)
        crc = zlib.crc32("x".join(str(d) for d in a32.shape).encode("ascii"), crc)
        crc = zlib.crc32(b"\x00", crc)
        crc = zlib.crc32(a32.tobytes(), crc)
    return crc


def serialize(bundle: ModelBundle) -> str:
    """Render a bundle as a UTF-8 JSON document. Parameters are stored at
    float32 precision; deserialize(serialize(b)) restores them bit-exactly."""
    params32 = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in bundle.params.items()}
    doc = {
        "format_version": bundle.format_version,
        "variant_id": bundle.variant_id,
        "window_s": bundle.window_s,
        "context_len": bundle.context_len,
        "feature_order": list(bundle.feature_order),
        "scaler": bundle.scaler.to_dict(),
        "params": [
            {
                "name": name,
                "shape": list(arr.shape),
                "values": [float(v) for v in arr.reshape(-1)],
            }
            for name, arr in params32.items()
        ],
        "meta": bundle.meta,
        "checksum": params_checksum(params32),
    }
    return json.dumps(doc, indent=1)


def deserialize(text: str) -> ModelBundle:
    """Parse and validate a bundle document.

    Checks the format version, the CRC-32 of the params section, declared
    shapes against value counts, and both against the architecture's own
    parameter spec.
    """
    doc = json.loads(text)
    version = doc.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise VersionMismatch(
            f"bundle format {version!r} unsupported (expected {BUNDLE_FORMAT_VERSION})")
    variant_id = doc["variant_id"]
    model = build_variant(variant_id)  # raises UnknownVariant

    params: dict[str, np.ndarray] = {}
    for entry in doc["params"]:
        shape = tuple(int(d) for d in entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float32)
        if values.size != int(np.prod(shape)):
            raise ShapeMismatch(
                f"param {entry['name']!r}: {values.size} values for shape {shape}")
        params[entry["name"]] = values.reshape(shape)

    expected = {s.name: s.shape for s in model.param_specs}
    if list(params) != list(expected):
        raise ShapeMismatch(
            f"bundle params {list(params)} do not match {variant_id} spec {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatch(
                f"param {name!r}: bundle shape {params[name].shape}, spec {shape}")

    stored = doc.get("checksum")
    actual = params_checksum(params)
    if stored != actual:
        raise ChecksumMismatch(f"params checksum {actual} != stored {stored}")

    return ModelBundle(
        variant_id=variant_id,
        window_s=int(doc["window_s"]),
        context_len=int(doc["context_len"]),
        scaler=ScalerStats.from_dict(doc["scaler"]),
        params=params,
        meta=doc.get("meta", {}),
        feature_order=tuple(doc["feature_order"]),
        format_version=version,
    )


def save_bundle(bundle: ModelBundle, path) -> None:
    from pathlib import Path
    Path(path).write_text(serialize(bundle) + "\n", encoding="utf-8")


def load_bundle(path) -> ModelBundle:
    from pathlib import Path
    return deserialize(Path(path).read_text(encoding="utf-8"))


class BundleRunner:
    """Inference wrapper: widens bundle weights to float64 once and serves
    batched predictions."""

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle
        self.model = build_variant(bundle.variant_id)
        self._params = {k: Tensor(np.asarray(v, dtype=np.float64))
                        for k, v in bundle.params.items()}

    def predict(self, batch: np.ndarray) -> tuple[np.ndarray, dict]:
        pred, aux = self.model.forward(self._params, Tensor(batch), tape=None, train=False)
        return pred.data.copy(), aux
