"""A small numpy neural-network engine: layers, losses, scaler and Adam.

Networks are plain lists of layer objects. Activations are numpy arrays:
``(batch, features)`` for dense layers and ``(batch, length, channels)``
between 1-D convolutions. A 2-D input to the first ``Conv1D`` is read as
``(batch, length)`` with one channel. ``Flatten`` emits the
``(length, channels)`` block in row-major order, so position varies slowest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ValidationError


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}

    def init(self, rng):
        pass

    def config(self):
        return {"kind": self.kind}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items() if k != "kind")
        return f"{type(self).__name__}({args})"


def _he_uniform(rng, fan_in, shape):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params = {"W": np.zeros((n_in, n_out)), "b": np.zeros(n_out)}

    def init(self, rng):
        self.params["W"] = _he_uniform(rng, self.n_in, (self.n_in, self.n_out))
        self.params["b"] = np.zeros(self.n_out)

    def config(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}

    def check_input(self, shape):
        return len(shape) == 2 and shape[1] == self.n_in

    def forward(self, x, training=False, rng=None):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dy, x):
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T, grads


class Conv1D(Layer):
    """Valid 1-D convolution, weights shaped ``(kernel, in_channels, out_channels)``."""

    kind = "conv1d"

    def __init__(self, in_channels, out_channels, kernel, stride=1):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = kernel, stride
        self.params = {"W": np.zeros((kernel, in_channels, out_channels)),
                       "b": np.zeros(out_channels)}

    def init(self, rng):
        fan_in = self.kernel * self.in_channels
        self.params["W"] = _he_uniform(rng, fan_in, self.params["W"].shape)
        self.params["b"] = np.zeros(self.out_channels)

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel, "stride": self.stride}

    def out_length(self, length):
        return (length - self.kernel) // self.stride + 1

    def check_input(self, shape):
        if len(shape) == 2:
            return self.in_channels == 1 and self.out_length(shape[1]) >= 1
        return len(shape) == 3 and shape[2] == self.in_channels and self.out_length(shape[1]) >= 1

    def forward(self, x, training=False, rng=None):
        flat_input = x.ndim == 2
        if flat_input:
            x = x[:, :, None]
        batch, length, _ = x.shape
        n_out = self.out_length(length)
        span = self.stride * (n_out - 1) + 1
        cols = np.stack([x[:, j:j + span:self.stride, :] for j in range(self.kernel)], axis=2)
        cols = cols.reshape(batch * n_out, self.kernel * self.in_channels)
        w = self.params["W"].reshape(-1, self.out_channels)
        y = (cols @ w + self.params["b"]).reshape(batch, n_out, self.out_channels)
        return y, (cols, length, flat_input)

    def backward(self, dy, cache):
        cols, length, flat_input = cache
        batch, n_out, _ = dy.shape
        dy2 = dy.reshape(batch * n_out, self.out_channels)
        grads = {"W": (cols.T @ dy2).reshape(self.params["W"].shape), "b": dy2.sum(axis=0)}
        dcols = (dy2 @ self.params["W"].reshape(-1, self.out_channels).T).reshape(
            batch, n_out, self.kernel, self.in_channels)
        dx = np.zeros((batch, length, self.in_channels), dtype=dy.dtype)
        span = self.stride * (n_out - 1) + 1
        for j in range(self.kernel):
            dx[:, j:j + span:self.stride, :] += dcols[:, :, j, :]
        return (dx[:, :, 0] if flat_input else dx), grads


class Relu(Layer):
    kind = "relu"

    def check_input(self, shape):
        return True

    def forward(self, x, training=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


class Softplus(Layer):
    kind = "softplus"

    def check_input(self, shape):
        return True

    def forward(self, x, training=False, rng=None):
        return np.logaddexp(0.0, x), x

    def backward(self, dy, x):
        return dy * (0.5 * (1.0 + np.tanh(0.5 * x))), {}


class Flatten(Layer):
    kind = "flatten"

    def check_input(self, shape):
        return True

    def forward(self, x, training=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` while training."""

    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValidationError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def config(self):
        return {"kind": self.kind, "rate": self.rate}

    def check_input(self, shape):
        return True

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0:
            return x, None
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dy, mask):
        return (dy if mask is None else dy * mask), {}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv1D, Relu, Softplus, Flatten, Dropout)}


def layer_from_config(config):
    config = dict(config)
    cls = LAYER_TYPES[config.pop("kind")]
    return cls(**config)


def init_network(net, seed):
    rng = np.random.default_rng(seed)
    for layer in net:
        layer.init(rng)
    return net


def parameters(net):
    """Every parameter array, in a fixed (layer, name) order."""
    return [layer.params[name] for layer in net for name in sorted(layer.params)]


def parameter_names(net):
    return [f"{i}.{layer.kind}.{name}" for i, layer in enumerate(net)
            for name in sorted(layer.params)]


def count_parameters(net):
    return sum(p.size for p in parameters(net))


def forward(net, X, training=False, dropout_seed=None):
    """Run ``net`` on ``X``; returns ``(Y, cache)`` with the cache used by :func:`backward`."""
    x = np.asarray(X, dtype=float)
    rng = np.random.default_rng(dropout_seed) if training else None
    cache = []
    for i, layer in enumerate(net):
        if not layer.check_input(x.shape):
            raise ValidationError(f"{layer!r} cannot take input of shape {x.shape}",
                                  layer_index=i)
        x, c = layer.forward(x, training, rng)
        cache.append(c)
    return x, cache


def backward(net, cache, dY):
    """Gradients of a scalar loss, one dict per layer (keys as in ``layer.params``)."""
    if len(cache) != len(net):
        raise ValidationError(f"cache has {len(cache)} entries for a {len(net)}-layer network")
    grads = [None] * len(net)
    dy = np.asarray(dY, dtype=float)
    for i in range(len(net) - 1, -1, -1):
        dy, grads[i] = net[i].backward(dy, cache[i])
    return grads


def flat_gradients(net, grads):
    return [g[name] for layer, g in zip(net, grads) for name in sorted(layer.params)]


def predict(net, X):
    return forward(net, X, training=False)[0]


# --------------------------------------------------------------------------
# Feature scaling


@dataclass
class StandardScaler:
    means: np.ndarray
    stds: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.stds = np.asarray(self.stds, dtype=float)
        if self.constant is None:
            self.constant = np.zeros(self.means.shape, dtype=bool)
        self.constant = np.asarray(self.constant, dtype=bool)

    @property
    def width(self):
        return self.means.shape[0]

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.width:
            raise ValidationError(f"scaler fitted on width {self.width}, got shape {X.shape}")
        return X

    def transform(self, X):
        return (self._check(X) - self.means) / self.stds

    def inverse(self, X):
        return self._check(X) * self.stds + self.means


def scaler_fit(X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError(f"cannot fit a scaler on shape {X.shape}")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    constant = stds == 0
    stds[constant] = 1.0
    return StandardScaler(means, stds, constant)


def scaler_transform(scaler, X):
    return scaler.transform(X)


def scaler_inverse(scaler, X):
    return scaler.inverse(X)


# --------------------------------------------------------------------------
# Losses. Both take 1-D prediction/target vectors and return (loss, dloss/dpred).


def maple_loss(y_hat, y):
    """Mean absolute percentage logarithmic error (natural log)."""
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if y_hat.shape != y.shape:
        raise ValidationError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    if np.any(y <= 0):
        raise DomainError("MAPLE needs strictly positive targets")
    if np.any(y_hat <= -1):
        raise DomainError("MAPLE needs predictions > -1")
    log_t = np.log1p(y)
    diff = np.log1p(y_hat) - log_t
    n = y.size
    loss = float(np.mean(np.abs(diff / log_t)))
    grad = np.sign(diff) / (n * log_t * (1.0 + y_hat))
    return loss, grad


def msle_loss(y_hat, y):
    """Mean squared logarithmic error (natural log)."""
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if y_hat.shape != y.shape:
        raise ValidationError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    if np.any(y < 0):
        raise DomainError("MSLE needs non-negative targets")
    if np.any(y_hat <= -1):
        raise DomainError("MSLE needs predictions > -1")
    diff = np.log1p(y_hat) - np.log1p(y)
    n = y.size
    return float(np.mean(diff ** 2)), 2.0 * diff / (n * (1.0 + y_hat))


LOSSES = {"maple": maple_loss, "msle": msle_loss}


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params):
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValidationError("parameter, gradient and state lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state
