"""Regression metrics and bundle evaluation reports."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .bench import PHASES, pool_datasets
from .errors import LayoutMismatchError, ValidationError
from .netspec import LayerKind, Mode


def _pair(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if y_hat.shape != y.shape:
        raise ValidationError(f"length mismatch: {y_hat.size} predictions, {y.size} targets")
    if y.size == 0:
        raise ValidationError("metrics need at least one sample")
    return y_hat, y


def mape(y_hat, y):
    """Mean absolute percentage error, in percent."""
    y_hat, y = _pair(y_hat, y)
    if np.any(y == 0):
        raise ValidationError("MAPE is undefined for zero targets")
    return float(100.0 * np.mean(np.abs((y_hat - y) / y)))


def mae(y_hat, y):
    y_hat, y = _pair(y_hat, y)
    return float(np.mean(np.abs(y_hat - y)))


def rmse(y_hat, y):
    y_hat, y = _pair(y_hat, y)
    return float(np.sqrt(np.mean((y_hat - y) ** 2)))


def r2(y_hat, y):
    y_hat, y = _pair(y_hat, y)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise ValidationError("R^2 is undefined for constant targets")
    return float(1.0 - np.sum((y_hat - y) ** 2) / ss_tot)


@dataclass
class MetricRow:
    n: int
    mape_percent: float
    mae_ms: float
    rmse_ms: float
    r_squared: float | None
    note: str = ""

    @classmethod
    def compute(cls, y_hat, y):
        try:
            r_squared, note = r2(y_hat, y), ""
        except ValidationError as exc:
            r_squared, note = None, str(exc)
        return cls(int(np.size(y)), mape(y_hat, y), mae(y_hat, y), rmse(y_hat, y), r_squared,
                   note)


@dataclass
class EvalReport:
    """Aggregate metrics over every evaluated (kind, phase) plus the per-slice rows.

    ``breakdown`` maps ``"kind/phase"`` to a :class:`MetricRow`, or ``None``
    when the test data had no samples of that kind.
    """

    n: int
    mape_percent: float
    mae_ms: float
    rmse_ms: float
    r_squared: float | None
    breakdown: dict = field(default_factory=dict)
    note: str = ""

    def to_dict(self):
        out = asdict(self)
        out["breakdown"] = {k: (asdict(v) if v is not None else None)
                            for k, v in self.breakdown.items()}
        return out

    def render(self):
        header = f"{'slice':<16}{'n':>8}{'MAPE %':>10}{'MAE ms':>12}{'RMSE ms':>12}{'R^2':>9}"
        lines = [header, "-" * len(header)]

        def fmt(name, row):
            r_sq = "n/a" if row.r_squared is None else f"{row.r_squared:.4f}"
            return (f"{name:<16}{row.n:>8}{row.mape_percent:>10.3f}{row.mae_ms:>12.4g}"
                    f"{row.rmse_ms:>12.4g}{r_sq:>9}")

        for name, row in self.breakdown.items():
            lines.append(fmt(name, row) if row is not None else f"{name:<16}{'absent':>8}")
        lines.append("-" * len(header))
        lines.append(fmt("all", self))
        return "\n".join(lines)


def _prepare(bundle, ds):
    want_mode = bundle.mode
    if ds.layout_id.task != bundle.task:
        raise LayoutMismatchError(f"dataset layout {ds.layout_id} is for {ds.layout_id.task.value}"
                                  f" but the bundle predicts {bundle.task.value}")
    if want_mode == Mode.UNSEEN and ds.layout_id.mode == Mode.PER_DEVICE:
        ds = ds.to_unseen()
    model = bundle.model(ds.layout_id.kind, PHASES[0])
    if ds.layout_id != model.layout_id:
        from .features import feature_names

        raise LayoutMismatchError(
            f"dataset columns {feature_names(ds.layout_id)} do not match the bundle's "
            f"expected columns {feature_names(model.layout_id)}")
    return ds


def evaluate_bundle(bundle, datasets):
    """Per-(kind, phase) and pooled metrics of ``bundle`` on held-out data."""
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    by_kind = {}
    for ds in datasets:
        if len(ds) == 0:
            raise ValidationError("empty test set")
        ds = _prepare(bundle, ds)
        by_kind.setdefault(ds.layout_id.kind, []).append(ds)
    preds, targets, breakdown = [], [], {}
    for kind in LayerKind:
        for phase in PHASES:
            key = f"{kind.value}/{phase}"
            if kind not in by_kind:
                breakdown[key] = None
                continue
            ds = pool_datasets(by_kind[kind])
            y = ds.targets(phase)
            y_hat = bundle.model(kind, phase).predict_many(ds.features())
            breakdown[key] = MetricRow.compute(y_hat, y)
            preds.append(y_hat)
            targets.append(y)
    total = MetricRow.compute(np.concatenate(preds), np.concatenate(targets))
    return EvalReport(total.n, total.mape_percent, total.mae_ms, total.rmse_ms,
                      total.r_squared, breakdown, total.note)
