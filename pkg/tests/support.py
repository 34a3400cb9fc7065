"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import math

import numpy as np

from latency_atlas import nn
from latency_atlas.bench import PHASES, generate_suite, measure_suite
from latency_atlas.features import LayoutId
from latency_atlas.models import ArchitectureId, PhaseModel, PredictorBundle
from latency_atlas.netspec import LayerKind, Mode, Scenario, Task, get_device

# Input column of the LeNet-5 table, in layer order.
LENET_INPUTS = ["32x32x1", "28x28x6", "14x14x6", "10x10x16", "5x5x16", "120", "84"]
# Individually measured elapsed time per LeNet-5 layer (ms); their sum is 3.231.
LENET_ELAPSED = {"Conv1": 0.523, "Pool1": 0.436, "Conv2": 0.478, "Pool2": 0.418,
                 "Fc1": 0.442, "Fc2": 0.472, "Out": 0.462}

# Constant per-(kind, phase) predictions reproducing the LeNet-5 walkthrough:
# Conv1 pre 0.145, execution phases summing to 0.340, Out post 0.051.
FIG3_STUB = {
    ("conv2d", "pre"): 0.145, ("conv2d", "exe"): 0.069, ("conv2d", "post"): 0.2,
    ("pooling", "pre"): 0.3, ("pooling", "exe"): 0.030, ("pooling", "post"): 0.2,
    ("dense", "pre"): 0.3, ("dense", "exe"): 0.142 / 3, ("dense", "post"): 0.051,
}


def inverse_softplus(c):
    return c + math.log(-math.expm1(-c))


def constant_model(layout, phase, value, arch=ArchitectureId.PERFNET):
    """Phase model that predicts ``value`` for every input: zero weights, tuned bias."""
    width = layout.width
    head = nn.Dense(width, 1)
    head.params["b"] = np.array([inverse_softplus(value)])
    scaler = nn.StandardScaler(np.zeros(width), np.ones(width))
    return PhaseModel(ArchitectureId(arch), layout, phase, scaler, [head, nn.Softplus()],
                      "maple", {"stub": True})


def constant_bundle(values=FIG3_STUB, task=Task.INFERENCE, mode=Mode.PER_DEVICE, device=None,
                    pool=()):
    models = {}
    for kind in LayerKind:
        layout = LayoutId(kind, task, mode)
        for phase in PHASES:
            models[(kind, phase)] = constant_model(layout, phase, values[(kind.value, phase)])
    return PredictorBundle(task, mode, models, device, list(pool), "1970-01-01T00:00:00+00:00")


class TableStub:
    """Predictor that splits each layer's measured elapsed time into three phases."""

    def __init__(self, elapsed):
        self.elapsed = elapsed

    def predict_layer(self, layer, scenario, device=None):
        t = self.elapsed[layer.name]
        return 0.5 * t, 0.25 * t, t - 0.75 * t


def oracle_dataset(kind, count, device="P1000", *, seed=0, noise_seed=1, noise_cv=0.03,
                   task=Task.INFERENCE):
    scenario = Scenario(task, optimizer="sgd" if task == Task.TRAINING else None)
    suite = generate_suite(kind, scenario, count, seed)
    return measure_suite(suite, get_device(device), noise_seed=noise_seed, noise_cv=noise_cv)


# --------------------------------------------------------------------------
# Definitional metric implementations, written as plain loops.


def brute_mape(y_hat, y):
    total = 0.0
    for a, b in zip(y_hat, y):
        total += abs((a - b) / b)
    return 100.0 * total / len(y)


def brute_mae(y_hat, y):
    return sum(abs(a - b) for a, b in zip(y_hat, y)) / len(y)


def brute_rmse(y_hat, y):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(y_hat, y)) / len(y))


def brute_r2(y_hat, y):
    mean = sum(y) / len(y)
    ss_res = sum((b - a) ** 2 for a, b in zip(y_hat, y))
    ss_tot = sum((b - mean) ** 2 for b in y)
    return 1.0 - ss_res / ss_tot


# --------------------------------------------------------------------------
# Finite differences


def grad_close(analytic, numeric, rel=1e-4, floor=1e-7):
    """Elementwise check: absolute error under ``floor`` or relative error under ``rel``.

    Also returns the largest relative error among elements above the floor.
    """
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (err <= floor) | (err <= rel * scale)
    relative = np.where(err > floor, err / np.maximum(scale, 1e-300), 0.0)
    return bool(ok.all()), float(relative.max(initial=0.0))


def _run_from(net, start, x):
    for layer in net[start:]:
        x, _ = layer.forward(x, False, None)
    return x


def row_losses(name, Y, y):
    """Per-row loss values for predictions ``Y`` of shape ``(P, batch)``."""
    Y = np.asarray(Y, dtype=float)
    log_t = np.log1p(np.asarray(y, dtype=float))
    diff = np.log1p(Y) - log_t
    if name == "maple":
        return np.mean(np.abs(diff / log_t), axis=1)
    return np.mean(diff ** 2, axis=1)


def numeric_network_gradients(net, X, objective, h=1e-5, chunk=2048):
    """Central-difference gradient of ``objective(net(X))`` for every parameter.

    ``objective`` maps outputs of shape ``(P, batch)`` to ``P`` scalar values so
    many perturbed copies of the network can be evaluated in one pass. A list of
    objectives shares the perturbed passes and yields one result per objective. For a
    perturbed layer, its input is cached and only the layers from it onward are
    re-run; Dense perturbations update the affected output column directly
    (``x @ (W + hE_ij)`` differs from ``x @ W`` only in column ``j``).
    """
    inputs, x = [], np.asarray(X, dtype=float)
    for layer in net:
        inputs.append(x)
        x, _ = layer.forward(x, False, None)
    batch = x.shape[0]
    objectives = objective if isinstance(objective, (list, tuple)) else [objective]
    results = [[] for _ in objectives]
    for li, layer in enumerate(net):
        grads = [{} for _ in objectives]
        x_in = inputs[li]
        base, _ = layer.forward(x_in, False, None)
        for name in sorted(layer.params):
            param = layer.params[name]
            g = np.empty((len(objectives), param.size))
            for start in range(0, param.size, chunk):
                idx = np.arange(start, min(start + chunk, param.size))
                vals = []
                for sign in (1.0, -1.0):
                    outs = np.repeat(base[None], idx.size, axis=0)
                    if isinstance(layer, nn.Dense):
                        if name == "W":
                            i, j = np.divmod(idx, layer.n_out)
                            outs[np.arange(idx.size), :, j] += sign * h * x_in[:, i].T
                        else:
                            outs[np.arange(idx.size), :, idx] += sign * h
                    else:
                        flat = param.reshape(-1)
                        for p, k in enumerate(idx):
                            saved = flat[k]
                            flat[k] = saved + sign * h
                            outs[p], _ = layer.forward(x_in, False, None)
                            flat[k] = saved
                    stacked = outs.reshape((idx.size * batch,) + base.shape[1:])
                    y = _run_from(net, li + 1, stacked).reshape(idx.size, batch)
                    vals.append(np.array([f(y) for f in objectives]))
                g[:, idx] = (vals[0] - vals[1]) / (2 * h)
            for k in range(len(objectives)):
                grads[k][name] = g[k].reshape(param.shape)
        for k in range(len(objectives)):
            results[k].append(grads[k])
    return results if isinstance(objective, (list, tuple)) else results[0]
