"""MLP, LSTM and LSTM-FCN sepsis classifiers on 12-hour heart-rate windows.

Architectures
-------------
mlp       12 -> Dense(w1, relu) -> Dense(w2, relu) -> Dense(w3, relu) -> Dense(1, sigmoid)
lstm      12x1 -> LSTM(w1) -> LSTM(w2) -> LSTM(w3, last) -> Dense(w4, tanh) -> Dense(1, sigmoid)
lstm_fcn  branch A: shuffle to 1x12 -> LSTM(32, last) -> Dropout(0.4)
          branch B: three parallel [Conv1D -> BatchNorm -> relu -> GlobalAvgPool] on 12x1
          concat(A, B) -> Dense(2, softmax)

Heart rates enter every network as ``(hr - 80) / 20``. The constants are part
of the architecture, not stored parameters.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import container
from . import nncore as nn
from .errors import BadSpec, FormatError, HorizonMismatch, NonFiniteLoss

HR_CENTER = 80.0
HR_SCALE = 20.0

REFERENCE_MLP_WIDTHS = (100, 148, 74)
REFERENCE_LSTM_WIDTHS = (48, 108, 52, 20)

NEURAL_FAMILIES = ("mlp", "lstm", "lstm_fcn")
FAMILIES = NEURAL_FAMILIES + ("gbdt",)

DEFAULT_EPOCHS = {"mlp": 390, "lstm": 190, "lstm_fcn": 300}
FINE_TUNE_EPOCHS = {"mlp": 50, "lstm": 50, "lstm_fcn": 100}
DEFAULT_LOSS = {"mlp": "mse", "lstm": "binary_ce", "lstm_fcn": "categorical_ce"}
# a tenth of the from-scratch rate; larger steps undo the 1-hour fit within a few epochs
FINE_TUNE_LEARNING_RATE = 1e-4

LSTM_FCN_DEFAULTS = {
    "lstm_units": 32,
    "dropout": 0.4,
    "filters": [16, 32, 16],
    "strides": [3, 3, 2],
    "kernels": [3, 3, 3],
    "bn_momentum": 0.99,
    "bn_epsilon": 0.001,
}


@dataclass
class ModelSpec:
    family: str
    layer_widths: tuple = ()
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        if self.family not in FAMILIES:
            raise BadSpec(f"unknown family {self.family!r}")
        arity = {"mlp": 3, "lstm": 4, "lstm_fcn": 1}.get(self.family)
        if arity is not None and len(self.layer_widths) != arity:
            raise BadSpec(f"{self.family} needs {arity} widths, got {len(self.layer_widths)}")
        if any(w < 1 for w in self.layer_widths):
            raise BadSpec(f"layer widths must be >= 1, got {self.layer_widths}")
        if self.family == "lstm_fcn":
            merged = dict(LSTM_FCN_DEFAULTS)
            merged.update(self.hyper)
            self.hyper = merged
            if not (len(merged["filters"]) == len(merged["strides"]) == len(merged["kernels"])):
                raise BadSpec("filters, strides and kernels must have equal length")

    def to_dict(self):
        return {"family": self.family, "layer_widths": list(self.layer_widths), "hyper": dict(self.hyper)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], tuple(d.get("layer_widths", ())), dict(d.get("hyper", {})))


def reference_spec(family) -> ModelSpec:
    if family == "mlp":
        return ModelSpec("mlp", REFERENCE_MLP_WIDTHS)
    if family == "lstm":
        return ModelSpec("lstm", REFERENCE_LSTM_WIDTHS)
    if family == "lstm_fcn":
        return ModelSpec("lstm_fcn", (LSTM_FCN_DEFAULTS["lstm_units"],))
    raise BadSpec(f"no reference architecture for {family!r}")


# ---------------------------------------------------------------------------
# closed-form parameter counts


def mlp_param_count(widths):
    sizes = (12,) + tuple(widths) + (1,)
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def lstm_param_count(widths):
    w1, w2, w3, w4 = widths
    total, n_in = 0, 1
    for h in (w1, w2, w3):
        total += 4 * (h * (n_in + h) + h)
        n_in = h
    return total + (w3 * w4 + w4) + (w4 + 1)


def lstm_fcn_param_count(hyper):
    h = {**LSTM_FCN_DEFAULTS, **hyper}
    units = h["lstm_units"]
    total = 4 * (units * (12 + units) + units)
    for f, k in zip(h["filters"], h["kernels"]):
        total += k * 1 * f + f + 2 * f  # conv kernel+bias, batchnorm gamma+beta
    features = units + sum(h["filters"])
    return total + features * 2 + 2


def conv_branch_lengths(hyper, timesteps=12):
    h = {**LSTM_FCN_DEFAULTS, **hyper}
    return [nn.conv_output_length(timesteps, k, s) for k, s in zip(h["kernels"], h["strides"])]


# ---------------------------------------------------------------------------
# networks


def _scale(X):
    return (X - HR_CENTER) / HR_SCALE


class MLPNet:
    output = "sigmoid"

    def __init__(self, widths, rng, dtype):
        sizes = (12,) + tuple(widths)
        self.hidden = [
            nn.Dense(f"dense_{i}", a, b, "relu", rng, dtype)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.out = nn.Dense("output", sizes[-1], 1, "linear", rng, dtype)
        self.layers = self.hidden + [self.out]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        return []

    def forward(self, X, train=False, rng=None):
        h = X
        for layer in self.layers:
            h = layer.forward(h, train, rng)
        return h

    def backward(self, dlogits):
        g = dlogits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class LSTMNet:
    output = "sigmoid"

    def __init__(self, widths, rng, dtype):
        w1, w2, w3, w4 = widths
        self.lstm = [
            nn.LSTM("lstm_0", 1, w1, rng, True, dtype),
            nn.LSTM("lstm_1", w1, w2, rng, True, dtype),
            nn.LSTM("lstm_2", w2, w3, rng, False, dtype),
        ]
        self.fc = nn.Dense("dense_0", w3, w4, "tanh", rng, dtype)
        self.out = nn.Dense("output", w4, 1, "linear", rng, dtype)
        self.layers = self.lstm + [self.fc, self.out]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        return []

    def forward(self, X, train=False, rng=None):
        h = X[:, :, None]
        for layer in self.layers:
            h = layer.forward(h, train, rng)
        return h

    def backward(self, dlogits):
        g = dlogits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g[:, :, 0]


class LSTMFCNNet:
    output = "softmax"

    def __init__(self, hyper, rng, dtype):
        self.hyper = hyper
        units = hyper["lstm_units"]
        self.lstm = nn.LSTM("lstm_0", 12, units, rng, False, dtype)
        self.rate = float(hyper["dropout"])
        self.convs, self.norms = [], []
        for i, (f, s, k) in enumerate(zip(hyper["filters"], hyper["strides"], hyper["kernels"])):
            self.convs.append(nn.Conv1D(f"conv_{i}", 1, f, k, s, rng, dtype))
            self.norms.append(nn.BatchNorm(f"bn_{i}", f, hyper["bn_momentum"], hyper["bn_epsilon"], dtype))
        self.n_features = units + sum(hyper["filters"])
        self.out = nn.Dense("output", self.n_features, 2, "linear", rng, dtype)
        self._cache = None

    def params(self):
        ps = self.lstm.params()
        for conv, bn in zip(self.convs, self.norms):
            ps += conv.params() + bn.params()
        return ps + self.out.params()

    def buffers(self):
        return [b for bn in self.norms for b in bn.buffers()]

    def forward(self, X, train=False, rng=None):
        seq = X[:, :, None]
        a = self.lstm.forward(nn.dimension_shuffle(seq), train, rng)
        a, mask = nn.dropout(a, self.rate, train, rng)
        feats, branch = [a], []
        for conv, bn in zip(self.convs, self.norms):
            z = bn.forward(conv.forward(seq, train, rng), train, rng)
            r = np.maximum(z, 0)
            feats.append(nn.global_avg_pool(r))
            branch.append((z, r.shape))
        h = np.concatenate(feats, axis=1)
        self._cache = (mask, branch, [f.shape[1] for f in feats])
        return self.out.forward(h, train, rng)

    def backward(self, dlogits):
        mask, branch, widths = self._cache
        dh = self.out.backward(dlogits)
        splits = np.split(dh, np.cumsum(widths)[:-1], axis=1)
        da = nn.dropout_backward(mask, splits[0])
        dseq = nn.dimension_shuffle(self.lstm.backward(da))
        for conv, bn, (z, shape), dpool in zip(self.convs, self.norms, branch, splits[1:]):
            dr = nn.global_avg_pool_backward(shape, dpool)
            dz = bn.backward(dr * (z > 0))
            dseq = dseq + conv.backward(dz)
        return dseq[:, :, 0]


@dataclass
class TrainedModel:
    spec: ModelSpec
    net: object
    horizon_hours: int = 1
    train_log: list = field(default_factory=list)
    val_log: list = field(default_factory=list)

    @property
    def family(self):
        return self.spec.family

    @property
    def parameters(self):
        return {p.name: p for p in self.net.params()}

    def parameter_count(self):
        return sum(p.size for p in self.net.params())


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 0.001
    loss_kind: str = None
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise BadSpec(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise BadSpec(f"batch_size must be >= 1, got {self.batch_size}")


def build_mlp(spec: ModelSpec, seed=0, dtype=np.float32, horizon=1) -> TrainedModel:
    if spec.family != "mlp":
        raise BadSpec(f"build_mlp got family {spec.family!r}")
    return TrainedModel(spec, MLPNet(spec.layer_widths, np.random.default_rng(seed), dtype), horizon)


def build_lstm(spec: ModelSpec, seed=0, dtype=np.float32, horizon=1) -> TrainedModel:
    if spec.family != "lstm":
        raise BadSpec(f"build_lstm got family {spec.family!r}")
    return TrainedModel(spec, LSTMNet(spec.layer_widths, np.random.default_rng(seed), dtype), horizon)


def build_lstm_fcn(spec: ModelSpec, seed=0, dtype=np.float32, horizon=1) -> TrainedModel:
    if spec.family != "lstm_fcn":
        raise BadSpec(f"build_lstm_fcn got family {spec.family!r}")
    hyper = dict(spec.hyper)
    hyper["lstm_units"] = spec.layer_widths[0]
    return TrainedModel(spec, LSTMFCNNet(hyper, np.random.default_rng(seed), dtype), horizon)


_BUILDERS = {"mlp": build_mlp, "lstm": build_lstm, "lstm_fcn": build_lstm_fcn}


def build(spec: ModelSpec, seed=0, dtype=np.float32, horizon=1) -> TrainedModel:
    if spec.family not in _BUILDERS:
        raise BadSpec(f"{spec.family!r} is not a neural family")
    return _BUILDERS[spec.family](spec, seed, dtype, horizon)


# ---------------------------------------------------------------------------
# training


def _head(net, logits, y, loss_kind):
    """Loss value and gradient w.r.t. the logits for one batch."""
    B = logits.shape[0]
    if net.output == "sigmoid":
        target = y.reshape(B, 1)
        p = nn.sigmoid(logits)
        value, dp = nn.loss(loss_kind, p, target)
        if loss_kind == "binary_ce":
            dz = (p - target) / B
        else:
            dz = dp * p * (1 - p)
    else:
        target = np.eye(2, dtype=logits.dtype)[y.astype(int)]
        p = nn.softmax(logits)
        value, dp = nn.loss(loss_kind, p, target)
        if loss_kind == "categorical_ce":
            dz = (p - target) / B
        else:
            dz = nn.softmax_backward(dp, p)
    return value, dz.astype(logits.dtype)


def _dtype(model):
    return model.net.params()[0].value.dtype


def train_step(model: TrainedModel, X, y, loss_kind, learning_rate, rng=None):
    """One forward/backward/Adam update on a single batch; returns the batch loss."""
    net = model.net
    Xs = _scale(np.asarray(X, dtype=_dtype(model)))
    logits = net.forward(Xs, train=True, rng=rng)
    value, dz = _head(net, logits, np.asarray(y), loss_kind)
    if not math.isfinite(value):
        return value
    net.backward(dz)
    for p in net.params():
        nn.adam_step(p, learning_rate)
    return value


def evaluate_loss(model: TrainedModel, X, y, loss_kind=None):
    loss_kind = loss_kind or DEFAULT_LOSS[model.family]
    logits = model.net.forward(_scale(np.asarray(X, dtype=_dtype(model))), train=False)
    value, _ = _head(model.net, logits, np.asarray(y), loss_kind)
    return value


def train(model: TrainedModel, train_set, val_set, config: TrainConfig) -> TrainedModel:
    """Mini-batch Adam training with a fresh shuffle every epoch.

    Appends one mean training loss per epoch to ``model.train_log`` (and the
    validation loss to ``model.val_log`` when a validation set is given).
    Raises NonFiniteLoss if a batch loss stops being finite.
    """
    if train_set.horizon_hours != model.horizon_hours:
        raise HorizonMismatch(
            f"model horizon {model.horizon_hours}h, training data {train_set.horizon_hours}h"
        )
    if len(train_set) == 0:
        raise BadSpec("empty training set")
    loss_kind = config.loss_kind or DEFAULT_LOSS[model.family]
    X, y = train_set.X, train_set.y
    n = len(y)
    rng = np.random.default_rng(config.shuffle_seed)
    bounds = list(range(0, n, config.batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        # a lone trailing sample would leave batch norm without statistics
        del bounds[-2]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start, stop in zip(bounds[:-1], bounds[1:]):
            idx = order[start:stop]
            value = train_step(model, X[idx], y[idx], loss_kind, config.learning_rate, rng)
            if not math.isfinite(value):
                raise NonFiniteLoss(len(model.train_log) + 1, value)
            total += value * len(idx)
        model.train_log.append(total / n)
        if val_set is not None and len(val_set):
            model.val_log.append(evaluate_loss(model, val_set.X, val_set.y, loss_kind))
    return model


def fine_tune(model: TrainedModel, dataset, epochs=None, config: TrainConfig = None, val_set=None) -> TrainedModel:
    """Continue training a 1-hour model on 4-hour windows; all layers stay trainable.

    The input model is left untouched. Optimizer moments start fresh. Without
    a config the step size is ``FINE_TUNE_LEARNING_RATE``.
    """
    if model.horizon_hours != 1:
        raise HorizonMismatch(f"fine_tune expects a 1-hour model, got {model.horizon_hours}h")
    if dataset.horizon_hours != 4:
        raise HorizonMismatch(f"fine_tune expects 4-hour windows, got {dataset.horizon_hours}h")
    tuned = copy.deepcopy(model)
    for p in tuned.net.params():
        p.adam_m[...] = 0
        p.adam_v[...] = 0
        p.step_count = 0
        p.zero_grad()
    tuned.horizon_hours = 4
    if config is None:
        config = TrainConfig(epochs=epochs or FINE_TUNE_EPOCHS[model.family], learning_rate=FINE_TUNE_LEARNING_RATE)
    elif epochs is not None:
        config = TrainConfig(epochs, config.batch_size, config.learning_rate, config.loss_kind, config.shuffle_seed)
    return train(tuned, dataset, val_set, config)


# ---------------------------------------------------------------------------
# inference


_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


def predict_proba(model: TrainedModel, X) -> np.ndarray:
    """Sepsis probability for each row of ``X`` (float64, strictly inside (0, 1))."""
    X = np.asarray(X, dtype=_dtype(model))
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != 12:
        raise BadSpec(f"windows must have 12 values, got {X.shape[1]}")
    logits = model.net.forward(_scale(X), train=False).astype(np.float64)
    if model.net.output == "sigmoid":
        p = expit(logits[:, 0])
    else:
        p = nn.softmax(logits)[:, 1]
    return np.clip(p, _P_LO, _P_HI)


def predict_class_proba(model: TrainedModel, X) -> np.ndarray:
    """``(N, 2)`` array of [P(non-sepsis), P(sepsis)]."""
    X = np.asarray(X, dtype=_dtype(model))
    if X.ndim == 1:
        X = X[None, :]
    logits = model.net.forward(_scale(X), train=False).astype(np.float64)
    if model.net.output == "softmax":
        return nn.softmax(logits)
    p = expit(logits[:, 0])
    return np.stack([1 - p, p], axis=1)


def predict(model: TrainedModel, window) -> float:
    values = window.values if hasattr(window, "values") and not isinstance(window, np.ndarray) else window
    return float(predict_proba(model, np.asarray(values, dtype=np.float64))[0])


# ---------------------------------------------------------------------------
# serialization


def _stored_arrays(model):
    arrays = [(p.name, p.value) for p in model.net.params()]
    return arrays + list(model.net.buffers())


def serialize(model: TrainedModel) -> bytes:
    arrays = _stored_arrays(model)
    meta = {
        "spec": model.spec.to_dict(),
        "blocks": [[name, list(a.shape)] for name, a in arrays],
    }
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    return container.pack(model.family, model.horizon_hours, meta, payload)


def deserialize(data: bytes) -> TrainedModel:
    family, horizon, meta, payload = container.unpack(data)
    if family not in NEURAL_FAMILIES:
        raise FormatError(f"container holds a {family} model, not a neural network")
    spec = ModelSpec.from_dict(meta["spec"])
    model = build(spec, horizon=horizon)
    arrays = _stored_arrays(model)
    if [[n, list(a.shape)] for n, a in arrays] != meta["blocks"]:
        raise FormatError("stored block layout does not match the spec")
    expected = sum(a.size for _, a in arrays) * 4
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, expected {expected}")
    offset = 0
    for _, a in arrays:
        nbytes = a.size * 4
        a[...] = np.frombuffer(payload, dtype="<f4", count=a.size, offset=offset).reshape(a.shape)
        offset += nbytes
    return model


def stored_value_count(model: TrainedModel) -> int:
    """Trainable parameters plus batch-norm running statistics."""
    return sum(a.size for _, a in _stored_arrays(model))
