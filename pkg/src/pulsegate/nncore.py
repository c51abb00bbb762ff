"""Hand-differentiated neural-network kernels on numpy arrays.

Every kernel works in the dtype of its inputs: models train in float32 and the
gradient checks run the very same functions on float64 copies.

Layout conventions
------------------
* dense inputs are ``(batch, features)``
* sequences are ``(batch, timesteps, channels)``
* LSTM gates are packed ``[input, forget, candidate, output]`` along the last
  axis of the kernel (``(in, 4H)``), recurrent kernel (``(H, 4H)``) and bias.
* conv1d kernels are ``(width, in_channels, filters)``; no padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatch, KernelTooLarge, ShapeMismatch

ACTIVATIONS = ("relu", "tanh", "sigmoid", "linear")
PROB_CLAMP = 1e-12


@dataclass
class ParamBlock:
    name: str
    value: np.ndarray
    grad: np.ndarray = None
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value)
        for attr in ("grad", "adam_m", "adam_v"):
            if getattr(self, attr) is None:
                setattr(self, attr, np.zeros_like(self.value))

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        return ParamBlock(
            self.name,
            self.value.astype(dtype),
            self.grad.astype(dtype),
            self.adam_m.astype(dtype),
            self.adam_v.astype(dtype),
            self.step_count,
        )


# ---------------------------------------------------------------------------
# activations


def sigmoid(z):
    # tanh form is overflow-free for either sign
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "linear":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def _activate_backward(dy, z, y, kind):
    if kind == "relu":
        return dy * (z > 0)
    if kind == "tanh":
        return dy * (1 - y * y)
    if kind == "sigmoid":
        return dy * y * (1 - y)
    return dy


def softmax(logits, axis=-1):
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# dense


def dense_forward(x, W: ParamBlock, b: ParamBlock, activation="linear"):
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"dense: x {x.shape}, W {W.shape}, b {b.shape}")
    z = x @ W.value + b.value
    y = _activate(z, activation)
    return y, (x, W, b, activation, z, y)


def dense_backward(ctx, dy):
    x, W, b, activation, z, y = ctx
    dy = np.asarray(dy)
    if dy.shape != y.shape:
        raise ShapeMismatch(f"dense backward: upstream {dy.shape} vs output {y.shape}")
    dz = _activate_backward(dy, z, y, activation)
    W.grad += x.T @ dz
    b.grad += dz.sum(axis=0)
    return dz @ W.value.T


# ---------------------------------------------------------------------------
# LSTM


def lstm_forward(x, Wx: ParamBlock, Wh: ParamBlock, b: ParamBlock, return_sequences=False):
    """Run an LSTM layer from zero initial state.

    Returns ``(h, cache)`` where ``h`` is ``(B, T, H)`` for full sequences or
    ``(B, H)`` for the last state only.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeMismatch(f"lstm expects (batch, time, channels), got {x.shape}")
    B, T, C = x.shape
    H = Wh.shape[0]
    if Wx.shape != (C, 4 * H) or Wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeMismatch(f"lstm: x {x.shape}, Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape}")
    dtype = np.result_type(x, Wx.value)
    xw = x @ Wx.value + b.value  # (B, T, 4H)
    hs = np.zeros((B, T + 1, H), dtype=dtype)
    cs = np.zeros((B, T + 1, H), dtype=dtype)
    gates = np.empty((B, T, 4 * H), dtype=dtype)
    tanh_c = np.empty((B, T, H), dtype=dtype)
    Wh_v = Wh.value
    for t in range(T):
        z = xw[:, t] + hs[:, t] @ Wh_v
        g = gates[:, t]
        g[:, :2 * H] = sigmoid(z[:, :2 * H])
        g[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        g[:, 3 * H:] = sigmoid(z[:, 3 * H:])
        cs[:, t + 1] = g[:, H:2 * H] * cs[:, t] + g[:, :H] * g[:, 2 * H:3 * H]
        tanh_c[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = g[:, 3 * H:] * tanh_c[:, t]
    out = hs[:, 1:] if return_sequences else hs[:, -1]
    cache = (x, Wx, Wh, b, return_sequences, hs, cs, gates, tanh_c)
    return out, cache


def lstm_backward(cache, dout):
    """Full backpropagation through time; returns the gradient w.r.t. the input."""
    x, Wx, Wh, b, return_sequences, hs, cs, gates, tanh_c = cache
    B, T, C = x.shape
    H = Wh.shape[0]
    dout = np.asarray(dout)
    expected = (B, T, H) if return_sequences else (B, H)
    if dout.shape != expected:
        raise ShapeMismatch(f"lstm backward: upstream {dout.shape}, expected {expected}")
    dz_all = np.empty_like(gates)
    dh_next = np.zeros((B, H), dtype=gates.dtype)
    dc_next = np.zeros((B, H), dtype=gates.dtype)
    Wh_T = Wh.value.T
    for t in reversed(range(T)):
        dh = dh_next + (dout[:, t] if return_sequences else (dout if t == T - 1 else 0))
        g = gates[:, t]
        i, f, cand, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        tc = tanh_c[:, t]
        dc = dc_next + dh * o * (1 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :H] = dc * cand * i * (1 - i)
        dz[:, H:2 * H] = dc * cs[:, t] * f * (1 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1 - cand * cand)
        dz[:, 3 * H:] = dh * tc * o * (1 - o)
        dc_next = dc * f
        dh_next = dz @ Wh_T
    Wh.grad += hs[:, :-1].reshape(-1, H).T @ dz_all.reshape(-1, 4 * H)
    Wx.grad += x.reshape(-1, C).T @ dz_all.reshape(-1, 4 * H)
    b.grad += dz_all.sum(axis=(0, 1))
    return dz_all @ Wx.value.T


# ---------------------------------------------------------------------------
# conv1d


def conv_output_length(timesteps, kernel, stride):
    if timesteps < kernel:
        raise KernelTooLarge(f"kernel {kernel} longer than sequence {timesteps}")
    return (timesteps - kernel) // stride + 1


def conv1d_forward(x, W: ParamBlock, b: ParamBlock, stride=1):
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeMismatch(f"conv1d expects (batch, time, channels), got {x.shape}")
    B, T, C = x.shape
    K, Cw, F = W.shape
    if Cw != C or b.shape != (F,):
        raise ShapeMismatch(f"conv1d: x {x.shape}, W {W.shape}, b {b.shape}")
    L = conv_output_length(T, K, stride)
    idx = stride * np.arange(L)[:, None] + np.arange(K)[None, :]
    cols = x[:, idx, :].reshape(B, L, K * C)
    y = cols @ W.value.reshape(K * C, F) + b.value
    return y, (x.shape, W, b, idx, cols)


def conv1d_backward(ctx, dy):
    x_shape, W, b, idx, cols = ctx
    B, T, C = x_shape
    K, _, F = W.shape
    L = idx.shape[0]
    dy = np.asarray(dy)
    if dy.shape != (B, L, F):
        raise ShapeMismatch(f"conv1d backward: upstream {dy.shape}, expected {(B, L, F)}")
    W.grad += (cols.reshape(-1, K * C).T @ dy.reshape(-1, F)).reshape(K, C, F)
    b.grad += dy.sum(axis=(0, 1))
    dcols = (dy @ W.value.reshape(K * C, F).T).reshape(B, L, K, C)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    np.add.at(dx, (slice(None), idx, slice(None)), dcols)
    return dx


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x, gamma: ParamBlock, beta: ParamBlock, running_mean, running_var,
                      momentum=0.99, epsilon=0.001, train=False):
    """Normalize over every axis but the last (channels).

    In train mode the batch statistics (population variance) are used and the
    running arrays are updated in place.
    """
    x = np.asarray(x)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"batchnorm: x {x.shape}, gamma {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if train:
        n = x.size // C
        if n < 2:
            raise DegenerateBatch("batchnorm needs at least two values per channel in train mode")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean) * inv_std
    y = gamma.value * xhat + beta.value
    return y, (xhat, inv_std, gamma, beta, axes, train)


def batchnorm_backward(ctx, dy):
    xhat, inv_std, gamma, beta, axes, train = ctx
    dy = np.asarray(dy)
    if dy.shape != xhat.shape:
        raise ShapeMismatch(f"batchnorm backward: upstream {dy.shape} vs {xhat.shape}")
    gamma.grad += (dy * xhat).sum(axis=axes)
    beta.grad += dy.sum(axis=axes)
    dxhat = dy * gamma.value
    if not train:
        return dxhat * inv_std
    n = xhat.size // xhat.shape[-1]
    return (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
    )


# ---------------------------------------------------------------------------
# dropout, pooling, reshaping


def dropout(x, rate=0.4, train=False, rng=None):
    """Inverted dropout. Returns ``(y, mask)``; the mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x)
    if not train or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(mask, dy):
    return dy if mask is None else dy * mask


def global_avg_pool(x):
    x = np.asarray(x)
    return x.mean(axis=-2)


def global_avg_pool_backward(x_shape, dy):
    T = x_shape[-2]
    return np.broadcast_to(np.expand_dims(dy, -2) / T, x_shape).copy()


def dimension_shuffle(x):
    """Swap the time and channel axes: ``(..., T, C) -> (..., C, T)``."""
    return np.swapaxes(np.asarray(x), -1, -2)


# ---------------------------------------------------------------------------
# losses


def loss(kind, prediction, target):
    """Mean-reduced loss and its gradient w.r.t. ``prediction``.

    ``categorical_ce`` takes class probabilities ``(B, K)`` and either one-hot
    targets of the same shape or integer class indices ``(B,)``.
    """
    p = np.asarray(prediction)
    t = np.asarray(target)
    if kind == "categorical_ce" and t.ndim == p.ndim - 1:
        t = np.eye(p.shape[-1], dtype=p.dtype)[t.astype(int)]
    if p.shape != t.shape:
        raise ShapeMismatch(f"loss: prediction {p.shape} vs target {t.shape}")
    t = t.astype(np.float64)
    if kind == "mse":
        diff = p.astype(np.float64) - t
        value = float(np.mean(diff * diff))
        grad = 2.0 * diff / diff.size
    elif kind == "binary_ce":
        q = np.clip(p.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
        value = float(-np.mean(t * np.log(q) + (1 - t) * np.log(1 - q)))
        grad = (-t / q + (1 - t) / (1 - q)) / q.size
    elif kind == "categorical_ce":
        q = np.clip(p.astype(np.float64), PROB_CLAMP, 1.0)
        batch = q.shape[0] if q.ndim > 1 else 1
        value = float(-np.sum(t * np.log(q)) / batch)
        grad = -t / q / batch
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return value, grad.astype(p.dtype if p.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(block: ParamBlock, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    block.step_count += 1
    t = block.step_count
    g = block.grad
    block.adam_m *= beta1
    block.adam_m += (1 - beta1) * g
    block.adam_v *= beta2
    block.adam_v += (1 - beta2) * (g * g)
    m_hat = block.adam_m / (1 - beta1 ** t)
    v_hat = block.adam_v / (1 - beta2 ** t)
    block.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    block.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(loss_fn, params, h=1e-5):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn()`` must run forward and backward, accumulating into each
    block's ``grad``, and return the scalar loss. It has to be deterministic.
    """
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# stateful layer wrappers used by the model assemblies


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


class Dense:
    def __init__(self, name, n_in, n_out, activation, rng, dtype=np.float32):
        self.activation = activation
        self.W = ParamBlock(f"{name}.kernel", glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype))
        self.b = ParamBlock(f"{name}.bias", np.zeros(n_out, dtype=dtype))
        self._ctx = None

    def params(self):
        return [self.W, self.b]

    def forward(self, x, train=False, rng=None):
        y, self._ctx = dense_forward(x, self.W, self.b, self.activation)
        return y

    def backward(self, dy):
        return dense_backward(self._ctx, dy)


class LSTM:
    def __init__(self, name, n_in, hidden, rng, return_sequences=False, dtype=np.float32):
        self.return_sequences = return_sequences
        H = hidden
        wx = glorot_uniform(rng, (n_in, 4 * H), n_in, 4 * H, dtype)
        wh = glorot_uniform(rng, (H, 4 * H), H, 4 * H, dtype)
        bias = np.zeros(4 * H, dtype=dtype)
        bias[H:2 * H] = 1.0  # forget gate
        self.Wx = ParamBlock(f"{name}.kernel", wx)
        self.Wh = ParamBlock(f"{name}.recurrent_kernel", wh)
        self.b = ParamBlock(f"{name}.bias", bias)
        self._cache = None

    def params(self):
        return [self.Wx, self.Wh, self.b]

    def forward(self, x, train=False, rng=None):
        y, self._cache = lstm_forward(x, self.Wx, self.Wh, self.b, self.return_sequences)
        return y

    def backward(self, dy):
        return lstm_backward(self._cache, dy)


class Conv1D:
    def __init__(self, name, n_in, filters, kernel, stride, rng, dtype=np.float32):
        self.stride = stride
        w = glorot_uniform(rng, (kernel, n_in, filters), kernel * n_in, kernel * filters, dtype)
        self.W = ParamBlock(f"{name}.kernel", w)
        self.b = ParamBlock(f"{name}.bias", np.zeros(filters, dtype=dtype))
        self._ctx = None

    def params(self):
        return [self.W, self.b]

    def forward(self, x, train=False, rng=None):
        y, self._ctx = conv1d_forward(x, self.W, self.b, self.stride)
        return y

    def backward(self, dy):
        return conv1d_backward(self._ctx, dy)


class BatchNorm:
    def __init__(self, name, channels, momentum=0.99, epsilon=0.001, dtype=np.float32):
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = ParamBlock(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = ParamBlock(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._ctx = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.gamma.name[:-6]}.moving_mean", self.running_mean),
                (f"{self.gamma.name[:-6]}.moving_variance", self.running_var)]

    def forward(self, x, train=False, rng=None):
        y, self._ctx = batchnorm_forward(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.momentum, self.epsilon, train,
        )
        return y

    def backward(self, dy):
        return batchnorm_backward(self._ctx, dy)
