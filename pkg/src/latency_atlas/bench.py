"""Microbenchmark suites, timing data and datasets.

Timing data comes from one of two sources:

* the synthetic oracle, an analytic FLOPs/bandwidth cost model standing in
  for GPU profiling, or
* measurement CSV files produced by an external profiler.

Measurement CSV contract (``ingest_profile_csv``): the header is exactly
``feature_names(layout) + ["device"] + [t_pre_1, t_exe_1, t_post_1,
t_pre_2, ...]`` with at least one repeat triple. Times are milliseconds.

Dataset archive: a directory holding ``meta.json`` and ``samples.csv``.
``samples.csv`` has the layout's feature columns followed by ``device,
t_pre, t_exe, t_post, repeats_used``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (DataContractError, HeaderMismatchError, LayoutMismatchError, ParseError,
                     RowError, UsageError, ValidationError)
from .features import (BASE_FEATURES, OPTIMIZER_FEATURES, FeatureVector, LayoutId,
                       feature_names, featurize)
from .netspec import (FIELD_RANGES, Activation, DeviceSpec, LayerKind, LayerSpec, Mode,
                      OptimizerFlags, Padding, Scenario, Task, Optimizer)

SUITE_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1
DEFAULT_REPEATS = 5
MAD_SCALE = 1.4826
MAD_THRESHOLD = 3.0
PHASES = ("pre", "exe", "post")


class Provenance(str, enum.Enum):
    SYNTHETIC = "synthetic"
    INGESTED = "ingested"


# --------------------------------------------------------------------------
# Suite generation


@dataclass(frozen=True)
class Microbenchmark:
    id: int
    layer: LayerSpec
    scenario: Scenario
    device: DeviceSpec | None = None


def _draw(rng, fname):
    lo, hi = FIELD_RANGES[fname]
    return int(rng.integers(lo, hi + 1))


def sample_layer(kind, rng):
    """Draw one layer uniformly over the feature ranges, resampling invalid geometry."""
    kind = LayerKind(kind)
    while True:
        batch = _draw(rng, "batch_size")
        if kind == LayerKind.DENSE:
            return LayerSpec(kind, batch, Activation(int(rng.integers(2))),
                             dim_input=_draw(rng, "dim_input"),
                             dim_output=_draw(rng, "dim_output"),
                             use_bias=bool(rng.integers(2)))
        matrix = _draw(rng, "matrix_size")
        if kind == LayerKind.CONV2D:
            kernel = _draw(rng, "kernel_size")
            cin, cout = _draw(rng, "channels_in"), _draw(rng, "channels_out")
            strides = _draw(rng, "strides")
            padding = Padding(int(rng.integers(2)))
            activation = Activation(int(rng.integers(2)))
            use_bias = bool(rng.integers(2))
            if padding == Padding.VALID and kernel > matrix:
                continue
            return LayerSpec(kind, batch, activation, matrix_size=matrix, kernel_size=kernel,
                             channels_in=cin, channels_out=cout, strides=strides,
                             padding=padding, use_bias=use_bias)
        cin = _draw(rng, "channels_in")
        strides = _draw(rng, "strides")
        padding = Padding(int(rng.integers(2)))
        activation = Activation(int(rng.integers(2)))
        pool = _draw(rng, "pool_size")
        if padding == Padding.VALID and pool > matrix:
            continue
        return LayerSpec(kind, batch, activation, matrix_size=matrix, channels_in=cin,
                         strides=strides, padding=padding, pool_size=pool)


def generate_suite(kind, scenario, count, seed):
    """Draw ``count`` benchmarks of one layer kind, deterministically from ``seed``.

    For training scenarios the optimizer is itself a feature and is drawn
    uniformly per benchmark; ``scenario.optimizer`` is ignored.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    optimizers = list(Optimizer)
    suite = []
    for i in range(count):
        layer = sample_layer(kind, rng)
        if scenario.task == Task.TRAINING:
            opt = optimizers[int(rng.integers(len(optimizers)))]
            bench_scenario = Scenario(Task.TRAINING, Mode.PER_DEVICE, OptimizerFlags.of(opt))
        else:
            bench_scenario = Scenario(Task.INFERENCE, Mode.PER_DEVICE)
        suite.append(Microbenchmark(i, layer, bench_scenario))
    return suite


def design_space_size(layout):
    """Number of distinct feature combinations in a layout's sampling ranges.

    Geometry constraints are ignored, and the optimizer block counts as one
    four-valued feature. Hardware columns are not counted.
    """
    layout = LayoutId.parse(layout)
    total = 1
    for name in BASE_FEATURES[layout.kind]:
        if name in FIELD_RANGES:
            lo, hi = FIELD_RANGES[name]
            total *= hi - lo + 1
        else:
            total *= 2
    if layout.task == Task.TRAINING:
        total *= len(OPTIMIZER_FEATURES)
    return total


def suite_to_dict(suite, kind, task, seed):
    from .netspec import layer_to_dict

    benches = []
    for b in suite:
        rec = {"id": b.id, "batch_size": b.layer.batch_size, "layer": layer_to_dict(b.layer)}
        if b.scenario.optimizer is not None:
            rec["optimizer"] = b.scenario.optimizer.optimizer.value
        benches.append(rec)
    return {"format_version": SUITE_FORMAT_VERSION, "kind": LayerKind(kind).value,
            "task": Task(task).value, "seed": seed, "count": len(suite), "benchmarks": benches}


def suite_from_dict(doc):
    from .netspec import layer_from_dict

    if doc.get("format_version") != SUITE_FORMAT_VERSION:
        raise ParseError(f"unsupported suite format_version {doc.get('format_version')!r}")
    task = Task(doc["task"])
    suite = []
    for rec in doc["benchmarks"]:
        layer = layer_from_dict(rec["layer"], rec["batch_size"], rec["id"])
        layer.check_ranges(rec["id"])
        optimizer = rec.get("optimizer") if task == Task.TRAINING else None
        suite.append(Microbenchmark(rec["id"], layer, Scenario(task, Mode.PER_DEVICE, optimizer)))
    return LayerKind(doc["kind"]), task, suite


def save_suite(suite, kind, task, seed, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "suite.json"
    path.write_text(json.dumps(suite_to_dict(suite, kind, task, seed), indent=1) + "\n")
    return path


def load_suite(path):
    path = Path(path)
    if path.is_dir():
        path = path / "suite.json"
    if not path.exists():
        raise DataContractError(f"no benchmark suite at {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return suite_from_dict(doc)


# --------------------------------------------------------------------------
# Synthetic oracle


@dataclass(frozen=True)
class OracleProfile:
    """Constants of the analytic timing model. Times are in milliseconds."""

    efficiency: float = 0.35
    launch_ms: float = 0.05
    sched_ms: float = 0.08
    ret_ms: float = 0.03
    pcie_gbs: float = 12.0
    bytes_per_element: int = 4
    optimizer_factors: dict = field(default_factory=lambda: {
        "sgd": 2.0, "adagrad": 2.2, "rmsprop": 2.3, "adam": 2.5})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParseError(f"unknown oracle profile key(s): {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None


DEFAULT_PROFILE = OracleProfile()


def tensor_elements(layer):
    """(input, output, parameter) element counts for one layer call."""
    b = layer.batch_size
    if layer.kind == LayerKind.DENSE:
        params = layer.dim_input * layer.dim_output + (layer.dim_output if layer.use_bias else 0)
        return b * layer.dim_input, b * layer.dim_output, params
    h, w, c = layer.output_shape
    inputs = b * layer.matrix_size ** 2 * layer.channels_in
    if layer.kind == LayerKind.CONV2D:
        params = layer.kernel_size ** 2 * layer.channels_in * layer.channels_out
        params += layer.channels_out if layer.use_bias else 0
    else:
        params = 0
    return inputs, b * h * w * c, params


def layer_flops(layer):
    b = layer.batch_size
    if layer.kind == LayerKind.DENSE:
        return 2 * layer.dim_input * layer.dim_output * b
    h, w, _ = layer.output_shape
    if layer.kind == LayerKind.CONV2D:
        return 2 * layer.kernel_size ** 2 * layer.channels_in * layer.channels_out * h * w * b
    return layer.pool_size ** 2 * layer.channels_in * h * w * b


def bytes_moved(layer, profile=DEFAULT_PROFILE):
    return profile.bytes_per_element * sum(tensor_elements(layer))


def oracle_phase_times(layer, device, scenario=None, profile=DEFAULT_PROFILE):
    """Noise-free (t_pre, t_exe, t_post) in milliseconds."""
    inputs, outputs, _ = tensor_elements(layer)
    t_exe = (layer_flops(layer) / (profile.efficiency * device.peak_tflops * 1e9)
             + bytes_moved(layer, profile) / (device.memory_bandwidth_gbs * 1e6)
             + profile.launch_ms)
    if scenario is not None and scenario.task == Task.TRAINING:
        t_exe *= profile.optimizer_factors[scenario.optimizer.optimizer.value]
    pcie = profile.pcie_gbs * 1e6
    t_pre = profile.bytes_per_element * inputs / pcie + profile.sched_ms
    t_post = profile.bytes_per_element * outputs / pcie + profile.ret_ms
    return t_pre, t_exe, t_post


@dataclass(frozen=True)
class TimingSample:
    features: FeatureVector
    t_pre: float
    t_exe: float
    t_post: float
    repeats_used: int = 1
    device: str | None = None

    def __post_init__(self):
        for name in ("t_pre", "t_exe", "t_post"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValidationError(f"{name} must be a finite non-negative time, got {value}")
        if self.repeats_used < 1:
            raise ValidationError(f"repeats_used must be >= 1, got {self.repeats_used}")

    def phase(self, name):
        return getattr(self, f"t_{name}")


def synth_oracle(bench, noise_seed, noise_cv, *, device=None, profile=DEFAULT_PROFILE,
                 repeats=1):
    """Synthesize one timing sample for ``bench``.

    Each of ``repeats`` observations multiplies the three noise-free phase
    times by independent lognormal factors with median 1 and coefficient of
    variation ``noise_cv``; the repeats are then cleaned with
    :func:`clean_outliers`. The noise stream depends only on
    ``(noise_seed, bench.id)``, so evaluation order does not matter.
    """
    device = device or bench.device
    if device is None:
        raise UsageError(f"benchmark {bench.id} has no device to measure on")
    if noise_cv < 0:
        raise ValidationError(f"noise_cv must be >= 0, got {noise_cv}")
    base = np.array(oracle_phase_times(bench.layer, device, bench.scenario, profile))
    if noise_cv == 0:
        observations = np.tile(base, (repeats, 1))
    else:
        sigma = math.sqrt(math.log1p(noise_cv ** 2))
        rng = np.random.default_rng([noise_seed, bench.id])
        observations = base * rng.lognormal(0.0, sigma, size=(repeats, 3))
    pre, exe, post, used = clean_outliers(observations.tolist())
    features = featurize(bench.layer, bench.scenario)
    return TimingSample(features, pre, exe, post, used, device.name)


def clean_outliers(repeats):
    """Robust per-phase summary of repeated ``(t_pre, t_exe, t_post)`` observations.

    Observations further than 3 scaled MADs from the phase median are
    dropped and the median of the survivors is returned. ``repeats_used``
    is the smallest survivor count over the three phases.
    """
    data = np.asarray(repeats, dtype=float)
    if data.size == 0:
        raise ValidationError("clean_outliers needs at least one repeat")
    data = data.reshape(-1, 3)
    result, used = [], data.shape[0]
    for column in data.T:
        med = np.median(column)
        mad = MAD_SCALE * np.median(np.abs(column - med))
        keep = column[np.abs(column - med) <= MAD_THRESHOLD * mad]
        if keep.size == 0:
            keep = column
            result.append(float(med))
        else:
            result.append(float(np.median(keep)))
        used = min(used, keep.size)
    return result[0], result[1], result[2], int(used)


# --------------------------------------------------------------------------
# Datasets


@dataclass
class Dataset:
    layout_id: LayoutId
    samples: list
    provenance: Provenance = Provenance.SYNTHETIC
    device_names: list = field(default_factory=list)
    devices: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layout_id = LayoutId.parse(self.layout_id)
        self.provenance = Provenance(self.provenance)
        for i, s in enumerate(self.samples):
            if s.features.layout_id != self.layout_id:
                raise LayoutMismatchError(f"sample {i} has layout {s.features.layout_id}, "
                                          f"dataset is {self.layout_id}")
        if not self.device_names:
            self.device_names = sorted({s.device for s in self.samples if s.device})

    def __len__(self):
        return len(self.samples)

    def features(self):
        return np.array([s.features.values for s in self.samples], dtype=float).reshape(
            len(self.samples), self.layout_id.width)

    def targets(self, phase):
        return np.array([s.phase(phase) for s in self.samples], dtype=float)

    def subset(self, indices):
        return Dataset(self.layout_id, [self.samples[i] for i in indices], self.provenance,
                       list(self.device_names), dict(self.devices), dict(self.meta))

    def to_unseen(self, devices=None):
        """Append each sample's hardware features, giving the unseen-device layout."""
        if self.layout_id.mode == Mode.UNSEEN:
            return self
        registry = dict(self.devices)
        registry.update(devices or {})
        layout = self.layout_id.unseen()
        samples = []
        for i, s in enumerate(self.samples):
            if s.device not in registry:
                raise DataContractError(f"sample {i}: no hardware description for device "
                                        f"{s.device!r}")
            fv = FeatureVector(s.features.values + tuple(registry[s.device].hardware_features()),
                               layout)
            samples.append(TimingSample(fv, s.t_pre, s.t_exe, s.t_post, s.repeats_used,
                                        s.device))
        used = {s.device for s in self.samples}
        return Dataset(layout, samples, self.provenance, list(self.device_names),
                       {k: v for k, v in registry.items() if k in used}, dict(self.meta))


def pool_datasets(datasets):
    """Concatenate datasets sharing one layout (e.g. several devices' data)."""
    datasets = list(datasets)
    if not datasets:
        raise UsageError("nothing to pool")
    layout = datasets[0].layout_id
    for ds in datasets[1:]:
        if ds.layout_id != layout:
            raise LayoutMismatchError(f"cannot pool {ds.layout_id} with {layout}")
    samples, devices, names = [], {}, []
    for ds in datasets:
        samples.extend(ds.samples)
        devices.update(ds.devices)
        names.extend(n for n in ds.device_names if n not in names)
    provenance = datasets[0].provenance
    return Dataset(layout, samples, provenance, names, devices,
                   {"pooled_from": [ds.meta for ds in datasets]})


def measure_suite(suite, device, *, noise_seed=0, noise_cv=0.0, repeats=DEFAULT_REPEATS,
                  profile=DEFAULT_PROFILE, workers=1):
    """Run the synthetic oracle over a suite; results follow benchmark id order."""
    if not suite:
        raise ValidationError("empty benchmark suite")

    def run(bench):
        return synth_oracle(bench, noise_seed, noise_cv, device=device, profile=profile,
                            repeats=repeats)

    ordered = sorted(suite, key=lambda b: b.id)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(run, ordered))
    else:
        samples = [run(b) for b in ordered]
    layout = samples[0].features.layout_id
    return Dataset(layout, samples, Provenance.SYNTHETIC, [device.name], {device.name: device},
                   {"noise_seed": noise_seed, "noise_cv": noise_cv, "repeats": repeats,
                    "oracle_profile": profile.to_dict()})


def _parse_float(cell, row, column):
    try:
        value = float(cell)
    except ValueError:
        raise RowError(f"non-numeric value {cell!r} in column {column!r}", row=row,
                       column=column) from None
    if not math.isfinite(value):
        raise RowError(f"non-finite value {cell!r} in column {column!r}", row=row,
                       column=column)
    return value


def ingest_profile_csv(path, layout_id, devices=None):
    """Read a measurement CSV into a cleaned :class:`Dataset`.

    Row numbers in errors are 1-based file line numbers (the header is line 1).
    """
    layout = LayoutId.parse(layout_id)
    names = feature_names(layout)
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataContractError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    expected = names + ["device"]
    for i, name in enumerate(expected):
        if i >= len(header) or header[i] != name:
            found = header[i] if i < len(header) else "<end of header>"
            missing = name if name not in header else None
            detail = f"missing column {missing!r}" if missing else f"expected {name!r}"
            raise HeaderMismatchError(f"{path}: {detail} at position {i + 1}, found {found!r}")
    repeat_cols = header[len(expected):]
    if not repeat_cols or len(repeat_cols) % 3:
        raise HeaderMismatchError(f"{path}: expected repeat triples t_pre_r,t_exe_r,t_post_r "
                                  f"after 'device', found {repeat_cols}")
    for r in range(len(repeat_cols) // 3):
        want = [f"t_{p}_{r + 1}" for p in PHASES]
        got = repeat_cols[3 * r:3 * r + 3]
        if got != want:
            raise HeaderMismatchError(f"{path}: expected repeat columns {want}, found {got}")
    if len(rows) == 1:
        raise DataContractError(f"{path}: no data rows")
    samples = []
    n_repeats = len(repeat_cols) // 3
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise RowError(f"expected {len(header)} cells, found {len(row)}", row=line)
        values = [_parse_float(cell, line, col) for cell, col in zip(row, names)]
        device = row[len(names)].strip()
        if not device:
            raise RowError("empty device cell", row=line, column="device")
        times = [_parse_float(c, line, col)
                 for c, col in zip(row[len(expected):], repeat_cols)]
        for value, col in zip(times, repeat_cols):
            if value < 0:
                raise RowError(f"negative time {value} in column {col!r}", row=line, column=col)
        try:
            fv = FeatureVector(tuple(values), layout)
        except (ValidationError, LayoutMismatchError) as exc:
            raise RowError(str(exc), row=line) from None
        pre, exe, post, used = clean_outliers(np.reshape(times, (n_repeats, 3)))
        samples.append(TimingSample(fv, pre, exe, post, used, device))
    registry = {k: v for k, v in (devices or {}).items() if k in {s.device for s in samples}}
    return Dataset(layout, samples, Provenance.INGESTED, devices=registry,
                   meta={"source": str(path), "repeats": n_repeats})


def split_dataset(ds, train_fraction=0.8, seed=0):
    if not 0 < train_fraction < 1:
        raise ValidationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(ds) == 0:
        raise ValidationError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_train = round(train_fraction * len(ds))
    return ds.subset(order[:n_train]), ds.subset(order[n_train:])


def save_dataset(ds, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "layout": str(ds.layout_id),
        "provenance": ds.provenance.value,
        "device_names": list(ds.device_names),
        "devices": [d.to_dict() for _, d in sorted(ds.devices.items())],
        "n_samples": len(ds),
        **ds.meta,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with (out_dir / "samples.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(feature_names(ds.layout_id) + ["device", "t_pre", "t_exe", "t_post",
                                                       "repeats_used"])
        for s in ds.samples:
            writer.writerow([repr(v) for v in s.features.values]
                            + [s.device or "", repr(s.t_pre), repr(s.t_exe), repr(s.t_post),
                               s.repeats_used])
    return out_dir


def load_dataset(path):
    path = Path(path)
    meta_path, csv_path = path / "meta.json", path / "samples.csv"
    if not meta_path.exists() or not csv_path.exists():
        raise DataContractError(f"{path} is not a dataset archive (needs meta.json and "
                                f"samples.csv)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path}: {exc}") from None
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise ParseError(f"{meta_path}: unsupported format_version "
                         f"{meta.get('format_version')!r}")
    layout = LayoutId.parse(meta["layout"])
    names = feature_names(layout)
    expected = names + ["device", "t_pre", "t_exe", "t_post", "repeats_used"]
    with csv_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise HeaderMismatchError(f"{csv_path}: expected columns {expected}, found {header}")
        samples = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise RowError(f"expected {len(expected)} cells, found {len(row)}", row=line)
            values = [_parse_float(c, line, n) for c, n in zip(row, names)]
            k = len(names)
            times = [_parse_float(row[k + 1 + j], line, expected[k + 1 + j]) for j in range(3)]
            try:
                samples.append(TimingSample(FeatureVector(tuple(values), layout), *times,
                                            int(row[k + 4]), row[k] or None))
            except ValueError as exc:
                raise RowError(str(exc), row=line) from None
    devices = {d["name"]: DeviceSpec.from_dict(d) for d in meta.pop("devices", [])}
    extra = {k: v for k, v in meta.items()
             if k not in ("format_version", "layout", "provenance", "device_names", "n_samples")}
    return Dataset(layout, samples, meta["provenance"], list(meta["device_names"]), devices,
                   extra)
