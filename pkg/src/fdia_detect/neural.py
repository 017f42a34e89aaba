"""Small float64 layer library with hand-written backward passes.

Tensors are plain numpy arrays. Each primitive comes as a pair of
functions ``*_forward(...) -> (out, cache)`` and ``*_backward(grad, cache)``;
the :class:`Layer` subclasses wrap them with parameter storage so a model can
be assembled as a :class:`Sequential`.

Convolutions use "same" zero padding and odd kernels, so sequence length is
preserved. Conv weights are (out_channels, in_channels, kernel); transposed
conv weights are (in_channels, out_channels, kernel) and the layer is the
exact adjoint of :func:`conv1d_forward` with the same weight tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from .errors import ConfigError, DataError, NumericError

DEFAULT_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values produced by {where}")
    return x


# ---------------------------------------------------------------- conv1d

def _im2col(x, kernel):
    n, c, length = x.shape
    pad = (kernel - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)  # (n, c, L, k)
    return cols.transpose(0, 2, 1, 3).reshape(n * length, c * kernel)


def conv1d_forward(x, w, b=None):
    """out[n,f,t] = b[f] + sum_c sum_k w[f,c,k] * x_pad[n,c,t+k]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DataError(f"conv1d expects (N, C, L) input, got shape {x.shape}")
    f, c, k = w.shape
    if k % 2 == 0:
        raise ConfigError(f"conv kernel must be odd, got {k}")
    if x.shape[1] != c:
        raise DataError(f"conv1d channel mismatch: input has {x.shape[1]}, weight expects {c}")
    n, _, length = x.shape
    cols = _im2col(x, k)
    out = cols @ w.reshape(f, c * k).T
    if b is not None:
        out += b
    out = out.reshape(n, length, f).transpose(0, 2, 1)
    return np.ascontiguousarray(out), (cols, x.shape, w)


def conv1d_backward(grad_out, cache, need_input_grad=True):
    cols, x_shape, w = cache
    n, c, length = x_shape
    f, _, k = w.shape
    if grad_out.shape != (n, f, length):
        raise DataError(f"conv1d backward: gradient shape {grad_out.shape} != {(n, f, length)}")
    g2 = grad_out.transpose(0, 2, 1).reshape(n * length, f)
    grad_w = (g2.T @ cols).reshape(f, c, k)
    grad_b = grad_out.sum(axis=(0, 2))
    if not need_input_grad:
        return None, grad_w, grad_b
    # input gradient is the adjoint (transposed) convolution of grad_out
    w_adj = np.ascontiguousarray(w.transpose(1, 0, 2)[:, :, ::-1]).reshape(c, f * k)
    gx = (_im2col(grad_out, k) @ w_adj.T).reshape(n, length, c).transpose(0, 2, 1)
    return np.ascontiguousarray(gx), grad_w, grad_b


def _transpose_kernel(w):
    # (in, out, k) adjoint kernel -> equivalent forward kernel (out, in, k), flipped
    return np.ascontiguousarray(w.transpose(1, 0, 2)[:, :, ::-1])


def transposed_conv1d_forward(y, w, b=None):
    """Adjoint of conv1d_forward for weight ``w`` of shape (in, out, k)."""
    out, cache = conv1d_forward(y, _transpose_kernel(w), b)
    return out, cache


def transposed_conv1d_backward(grad_out, cache):
    gx, gw_eq, gb = conv1d_backward(grad_out, cache)
    return gx, np.ascontiguousarray(gw_eq[:, :, ::-1].transpose(1, 0, 2)), gb


# ---------------------------------------------------------------- dense

def dense_forward(x, w, b=None):
    """Affine map on the last axis; ``w`` is (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise DataError(f"dense input width {x.shape[-1]} != weight in-features {w.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    out = x2 @ w.T
    if b is not None:
        out += b
    return out.reshape(lead + (w.shape[0],)), (x2, x.shape, w)


def dense_backward(grad_out, cache):
    x2, x_shape, w = cache
    g2 = grad_out.reshape(-1, w.shape[0])
    if len(g2) != len(x2):
        raise DataError("dense backward: gradient does not match cached input")
    return (g2 @ w).reshape(x_shape), g2.T @ x2, g2.sum(axis=0)


# ---------------------------------------------------------------- activations

def leaky_relu_forward(x, slope=DEFAULT_SLOPE):
    gain = np.where(x > 0, 1.0, slope)
    return x * gain, gain


def leaky_relu_backward(grad_out, gain):
    return grad_out * gain


def dropout_forward(x, rate, training, rng=None):
    """Inverted dropout: kept units are scaled by 1/(1-rate) while training."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    if rng is None:
        raise ConfigError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


# ---------------------------------------------------------------- batchnorm

def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0,) + tuple(range(2, x.ndim))


def _bn_shape(x):
    return (1, -1) + (1,) * (x.ndim - 2)


def batchnorm_forward(x, gamma, beta, state, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel (axis 1) batch normalization.

    ``state`` is a dict holding ``running_mean``/``running_var`` arrays (or
    None before the first training batch); it is updated in place while
    training.
    """
    axes = _bn_axes(x)
    shape = _bn_shape(x)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if state.get("running_mean") is None:
            state["running_mean"] = mean.copy()
            state["running_var"] = var.copy()
        else:
            state["running_mean"] = momentum * state["running_mean"] + (1 - momentum) * mean
            state["running_var"] = momentum * state["running_var"] + (1 - momentum) * var
    else:
        if state.get("running_mean") is None:
            raise DataError("no running statistics: batchnorm has not seen a training batch")
        mean, var = state["running_mean"], state["running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, training, axes, shape)


def batchnorm_backward(grad_out, cache):
    xhat, inv_std, gamma, training, axes, shape = cache
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    gxhat = grad_out * gamma.reshape(shape)
    if not training:
        return gxhat * inv_std.reshape(shape), grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    gx = (inv_std.reshape(shape) / m) * (
        m * gxhat
        - gxhat.sum(axis=axes).reshape(shape)
        - xhat * (gxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return gx, grad_gamma, grad_beta


# ---------------------------------------------------------------- layers

def _he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base layer. ``params``/``grads`` map short names to arrays."""

    kind = "layer"

    def __init__(self, name=""):
        self.name = name
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.cache = None

    # parameters that the L2 penalty applies to
    regularized = ()

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def load_buffers(self, values: Dict[str, np.ndarray]):
        pass

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _accumulate(self, **grads):
        for k, g in grads.items():
            if k in self.grads and self.grads[k].shape == g.shape:
                self.grads[k] += g
            else:
                self.grads[k] = g.copy()


class Conv1D(Layer):
    kind = "conv1d"
    regularized = ("weight",)

    def __init__(self, in_channels, filters, kernel, rng, name="", need_input_grad=True):
        super().__init__(name)
        self.need_input_grad = need_input_grad
        if kernel % 2 == 0:
            raise ConfigError(f"conv kernel must be odd, got {kernel}")
        self.params["weight"] = _he_uniform(rng, (filters, in_channels, kernel), in_channels * kernel)
        self.params["bias"] = np.zeros(filters)

    def forward(self, x, training=False, rng=None):
        out, self.cache = conv1d_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, grad):
        gx, gw, gb = conv1d_backward(grad, self.cache, self.need_input_grad)
        self._accumulate(weight=gw, bias=gb)
        return gx


class TransposedConv1D(Layer):
    kind = "tconv1d"
    regularized = ("weight",)

    def __init__(self, in_channels, filters, kernel, rng, name=""):
        super().__init__(name)
        if kernel % 2 == 0:
            raise ConfigError(f"conv kernel must be odd, got {kernel}")
        self.params["weight"] = _he_uniform(rng, (in_channels, filters, kernel), in_channels * kernel)
        self.params["bias"] = np.zeros(filters)

    def forward(self, x, training=False, rng=None):
        out, self.cache = transposed_conv1d_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, grad):
        gx, gw, gb = transposed_conv1d_backward(grad, self.cache)
        self._accumulate(weight=gw, bias=gb)
        return gx


class Dense(Layer):
    kind = "dense"
    regularized = ("weight",)

    def __init__(self, in_features, out_features, rng, name="", init="he"):
        super().__init__(name)
        if init == "he":
            w = _he_uniform(rng, (out_features, in_features), in_features)
        else:
            bound = math.sqrt(6.0 / (in_features + out_features))
            w = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.params["weight"] = w
        self.params["bias"] = np.zeros(out_features)

    def forward(self, x, training=False, rng=None):
        out, self.cache = dense_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, grad):
        gx, gw, gb = dense_backward(grad, self.cache)
        self._accumulate(weight=gw, bias=gb)
        return gx


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope=DEFAULT_SLOPE, name=""):
        super().__init__(name)
        self.slope = slope

    def forward(self, x, training=False, rng=None):
        out, self.cache = leaky_relu_forward(x, self.slope)
        return out

    def backward(self, grad):
        return leaky_relu_backward(grad, self.cache)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate, name=""):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        out, self.cache = dropout_forward(x, self.rate, training, rng)
        return out

    def backward(self, grad):
        return dropout_backward(grad, self.cache)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS, name=""):
        super().__init__(name)
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.state = {"running_mean": None, "running_var": None}
        # frozen: behave as in eval mode even during a training pass
        self.frozen = False

    def forward(self, x, training=False, rng=None):
        out, self.cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"], self.state,
            training and not self.frozen, self.momentum, self.eps)
        return out

    def backward(self, grad):
        gx, gg, gb = batchnorm_backward(grad, self.cache)
        self._accumulate(gamma=gg, beta=gb)
        return gx

    def buffers(self):
        if self.state["running_mean"] is None:
            return {}
        return {"running_mean": self.state["running_mean"], "running_var": self.state["running_var"]}

    def load_buffers(self, values):
        if "running_mean" in values:
            self.state["running_mean"] = np.array(values["running_mean"], dtype=np.float64)
            self.state["running_var"] = np.array(values["running_var"], dtype=np.float64)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape, name=""):
        super().__init__(name)
        self.shape = tuple(shape)

    def forward(self, x, training=False, rng=None):
        self.cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self.cache)


class Permute(Layer):
    kind = "permute"

    def __init__(self, axes, name=""):
        super().__init__(name)
        self.axes = tuple(axes)
        self.inverse = tuple(np.argsort(self.axes))

    def forward(self, x, training=False, rng=None):
        return np.ascontiguousarray(x.transpose(self.axes))

    def backward(self, grad):
        return np.ascontiguousarray(grad.transpose(self.inverse))


class Sequential:
    def __init__(self, layers: Iterable[Layer], name=""):
        self.layers: List[Layer] = list(layers)
        self.name = name

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = check_finite(layer.forward(x, training, rng), f"{self.name}.{layer.name}")
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if grad is None:  # nothing upstream needs an input gradient
                break
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self):
        for layer in self.layers:
            for k, v in layer.params.items():
                yield f"{self.name}.{layer.name}.{k}", layer, k

    def parameters(self) -> Dict[str, np.ndarray]:
        return {full: layer.params[k] for full, layer, k in self.named_params()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {full: layer.grads.get(k, np.zeros_like(layer.params[k]))
                for full, layer, k in self.named_params()}

    def regularized_weights(self):
        for layer in self.layers:
            for k in layer.regularized:
                yield f"{self.name}.{layer.name}.{k}", layer.params[k]

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for k, v in layer.buffers().items():
                out[f"{self.name}.{layer.name}.{k}"] = v
        return out

    def load_buffers(self, values: Dict[str, np.ndarray]):
        for layer in self.layers:
            prefix = f"{self.name}.{layer.name}."
            mine = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
            if mine:
                layer.load_buffers(mine)


# ---------------------------------------------------------------- optimizer

def scheduled_rate(initial, decay, interval, step):
    """Step-decay schedule: initial * decay ** floor(step / interval)."""
    return initial * decay ** (step // interval)


@dataclass
class OptimizerState:
    initial_rate: float = 1e-3
    decay: float = 0.95
    interval: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    schedule_step: int = 0  # epochs completed; drives the learning-rate decay
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)

    @property
    def rate(self):
        return scheduled_rate(self.initial_rate, self.decay, self.interval, self.schedule_step)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState):
    """In-place Adam update of ``params`` with bias-corrected moments.

    Each parameter keeps its own update count so that groups stepped on
    alternate calls (encoder / decoder) get correct bias correction.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DataError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    lr = state.rate
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        t = state.t.get(name, 0) + 1
        state.t[name] = t
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step += 1
    return params, state


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def failing(self):
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def ok(self):
        return not self.failing

    def __str__(self):
        lines = [f"{k}: {e:.3e}{'  FAIL' if k in self.failing else ''}" for k, e in self.errors.items()]
        return "\n".join(lines)


def relative_error(a, b, floor=1e-12):
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||) of one block."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def grad_check(loss_fn, params: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray],
               tolerance=1e-4, h=1e-5, max_entries: Optional[int] = None, rng=None):
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``loss_fn()`` must read the arrays in ``params`` (perturbed in place).
    Errors are reported per parameter block as a norm-wise relative error,
    which stays meaningful when individual entries are near zero.
    """
    errors = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(len(idx))
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn()
            flat[k] = orig - h
            down = loss_fn()
            flat[k] = orig
            numeric[j] = (up - down) / (2 * h)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return GradCheckReport(errors, tolerance)
