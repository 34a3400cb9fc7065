"""Compose per-layer phase predictions into network latency.

A single batch costs the first layer's preprocessing, every layer's
execution, and the last layer's postprocessing::

    T_batch = t_pre[0] + sum(t_exe[i] for every layer i) + t_post[k]

Intermediate layers exchange data on the device, so their own pre/post
phases are not paid. An epoch over ``n`` samples with batch size ``m`` costs
``ceil(n / m) * T_batch``; a partial last batch costs a full one.

Any object with ``predict_layer(layer, scenario, device) -> (pre, exe, post)``
can act as the predictor; :class:`~latency_atlas.models.PredictorBundle` is
the usual one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class LayerTiming:
    index: int
    name: str
    kind: str
    t_pre: float
    t_exe: float
    t_post: float

    @property
    def standalone_ms(self):
        return self.t_pre + self.t_exe + self.t_post


@dataclass(frozen=True)
class PhaseBreakdown:
    layers: tuple
    total_ms: float
    network: str = ""
    batch_size: int = 0

    @property
    def naive_sum_ms(self):
        return sum(r.standalone_ms for r in self.layers)

    def to_dict(self):
        return {
            "network": self.network,
            "batch_size": self.batch_size,
            "total_ms": self.total_ms,
            "naive_sum_ms": self.naive_sum_ms,
            "layers": [asdict(r) for r in self.layers],
        }

    def render(self):
        rows = [("#", "name", "kind", "t_pre", "t_exe", "t_post", "counted")]
        last = len(self.layers) - 1
        for r in self.layers:
            counted = r.t_exe + (r.t_pre if r.index == 0 else 0.0) + (
                r.t_post if r.index == last else 0.0)
            rows.append((str(r.index), r.name, r.kind, f"{r.t_pre:.4f}", f"{r.t_exe:.4f}",
                         f"{r.t_post:.4f}", f"{counted:.4f}"))
        widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
        lines = ["  ".join(cell.rjust(w) if c >= 3 or c == 0 else cell.ljust(w)
                           for c, (cell, w) in enumerate(zip(row, widths)))
                 for row in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.append(f"total (ms): {self.total_ms:.4f}   naive sum (ms): {self.naive_sum_ms:.4f}")
        return "\n".join(lines)


def compose_phase_times(phases):
    """Single-batch total from per-layer ``(pre, exe, post)`` triples in network order."""
    phases = list(phases)
    if not phases:
        raise ValidationError("cannot compose an empty network")
    return phases[0][0] + sum(p[1] for p in phases) + phases[-1][2]


def layer_timings(net, predictor, scenario, device=None):
    out = []
    for i, layer in enumerate(net.layers):
        pre, exe, post = predictor.predict_layer(layer, scenario, device)
        out.append(LayerTiming(i, layer.name or f"{layer.kind.value}{i}", layer.kind.value,
                               float(pre), float(exe), float(post)))
    return tuple(out)


def predict_single_batch(net, predictor, scenario, device=None):
    timings = layer_timings(net, predictor, scenario, device)
    total = compose_phase_times((t.t_pre, t.t_exe, t.t_post) for t in timings)
    return PhaseBreakdown(timings, total, net.name, net.batch_size)


def naive_sum(net, predictor, scenario, device=None):
    """Sum of every layer's standalone time; overestimates, kept for comparison."""
    return sum(t.standalone_ms for t in layer_timings(net, predictor, scenario, device))


def epoch_time(batch_ms, n, m):
    if n < 1 or m < 1:
        raise ValidationError(f"need n >= 1 and batch size >= 1, got n={n}, m={m}")
    return math.ceil(n / m) * batch_ms


def predict_epoch(net, predictor, scenario, n, device=None):
    batch = predict_single_batch(net, predictor, scenario, device)
    return epoch_time(batch.total_ms, n, net.batch_size)
