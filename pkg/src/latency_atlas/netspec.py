"""Networks, layers, devices and scenarios, plus the network JSON format.

A network file looks like::

    {
      "format_version": 1,
      "name": "lenet5",
      "batch_size": 1,
      "layers": [
        {"kind": "conv2d", "name": "Conv1", "matrix_size": 32, "kernel_size": 5,
         "channels_in": 1, "channels_out": 6, "strides": 1, "padding": "valid",
         "activation": "relu", "use_bias": true},
        {"kind": "pooling", "name": "Pool1", "matrix_size": 28, "channels_in": 6,
         "pool_size": 2},
        {"kind": "dense", "name": "Fc1", "dim_input": 400, "dim_output": 120}
      ]
    }

Omitted optional keys take these defaults: ``strides`` is 1 for conv2d and
``pool_size`` for pooling, ``padding`` is ``"valid"``, ``activation`` is
``"relu"`` and ``use_bias`` is true. A dense layer that follows a spatial
layer flattens its input implicitly.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .errors import GeometryError, ParseError, ShapeMismatchError, ValidationError

NETWORK_FORMAT_VERSION = 1


class LayerKind(str, enum.Enum):
    CONV2D = "conv2d"
    POOLING = "pooling"
    DENSE = "dense"


class Padding(enum.IntEnum):
    VALID = 0
    SAME = 1


class Activation(enum.IntEnum):
    NONE = 0
    RELU = 1


class Task(str, enum.Enum):
    INFERENCE = "inference"
    TRAINING = "training"


class Mode(str, enum.Enum):
    PER_DEVICE = "per-device"
    UNSEEN = "unseen"


# Sampling ranges of the layer features, inclusive.
FIELD_RANGES = {
    "batch_size": (1, 64),
    "matrix_size": (1, 512),
    "kernel_size": (1, 7),
    "channels_in": (1, 9999),
    "channels_out": (1, 9999),
    "strides": (1, 4),
    "dim_input": (1, 4096),
    "dim_output": (1, 4096),
    "pool_size": (1, 7),
}

# Ranges spanned by the hardware features of the profiled devices.
HARDWARE_RANGES = {
    "basic_clock_mhz": (1076.0, 1607.0),
    "cuda_cores": (640, 3584),
    "memory_clock_mhz": (1127.0, 1901.0),
    "memory_bandwidth_gbs": (80.19, 484.4),
    "peak_tflops": (1.894, 11.34),
}

KIND_FIELDS = {
    LayerKind.CONV2D: ("matrix_size", "kernel_size", "channels_in", "channels_out",
                       "strides", "padding", "activation", "use_bias"),
    LayerKind.POOLING: ("matrix_size", "channels_in", "strides", "padding",
                        "activation", "pool_size"),
    LayerKind.DENSE: ("dim_input", "dim_output", "activation", "use_bias"),
}

_OPTIONAL_FIELDS = ("matrix_size", "kernel_size", "channels_in", "channels_out", "strides",
                    "padding", "use_bias", "dim_input", "dim_output", "pool_size")


@dataclass(frozen=True)
class LayerSpec:
    """One conv2d, pooling or dense layer.

    Fields that do not apply to ``kind`` must be ``None``. Range checks
    against ``FIELD_RANGES`` are separate (see :meth:`range_violations`)
    so real networks can be loaded in extrapolation mode.
    """

    kind: LayerKind
    batch_size: int
    activation: Activation = Activation.RELU
    matrix_size: int | None = None
    kernel_size: int | None = None
    channels_in: int | None = None
    channels_out: int | None = None
    strides: int | None = None
    padding: Padding | None = None
    use_bias: bool | None = None
    dim_input: int | None = None
    dim_output: int | None = None
    pool_size: int | None = None
    name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.padding is not None:
            object.__setattr__(self, "padding", Padding(self.padding))
        relevant = KIND_FIELDS[self.kind]
        for fname in _OPTIONAL_FIELDS:
            value = getattr(self, fname)
            if fname in relevant and value is None:
                raise ValidationError(f"{self.kind.value} layer requires {fname!r}", field=fname)
            if fname not in relevant and value is not None:
                raise ValidationError(f"{fname!r} does not apply to a {self.kind.value} layer",
                                      field=fname)
        for fname in ("batch_size",) + tuple(f for f in relevant if f in FIELD_RANGES):
            value = getattr(self, fname)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValidationError(f"{fname} must be an integer, got {value!r}", field=fname)
            if value < 1:
                raise ValidationError(f"{fname} must be positive, got {value}", field=fname)
        if self.use_bias is not None and not isinstance(self.use_bias, bool):
            raise ValidationError(f"use_bias must be a boolean, got {self.use_bias!r}",
                                  field="use_bias")
        window = self.window
        if window is not None and self.padding == Padding.VALID and window > self.matrix_size:
            fname = "kernel_size" if self.kind == LayerKind.CONV2D else "pool_size"
            raise GeometryError(
                f"{fname} {window} exceeds matrix_size {self.matrix_size} with valid padding",
                field=fname)

    @property
    def window(self):
        if self.kind == LayerKind.CONV2D:
            return self.kernel_size
        if self.kind == LayerKind.POOLING:
            return self.pool_size
        return None

    @property
    def input_shape(self):
        if self.kind == LayerKind.DENSE:
            return (self.dim_input,)
        return (self.matrix_size, self.matrix_size, self.channels_in)

    @property
    def output_shape(self):
        return infer_output_shape(self, self.input_shape)

    def range_violations(self):
        """Return ``(field, value, (lo, hi))`` for every out-of-range field."""
        out = []
        for fname in ("batch_size",) + KIND_FIELDS[self.kind]:
            if fname not in FIELD_RANGES:
                continue
            lo, hi = FIELD_RANGES[fname]
            value = getattr(self, fname)
            if not lo <= value <= hi:
                out.append((fname, value, (lo, hi)))
        return out

    def check_ranges(self, index=None):
        violations = self.range_violations()
        if violations:
            fname, value, (lo, hi) = violations[0]
            raise ValidationError(f"{fname}={value} outside range {lo}-{hi}",
                                  layer_index=index, field=fname)

    def with_batch_size(self, batch_size):
        return replace(self, batch_size=batch_size)


def conv2d(batch_size, matrix_size, kernel_size, channels_in, channels_out, *, strides=1,
           padding=Padding.VALID, activation=Activation.RELU, use_bias=True, name=None):
    return LayerSpec(LayerKind.CONV2D, batch_size, activation, matrix_size=matrix_size,
                     kernel_size=kernel_size, channels_in=channels_in,
                     channels_out=channels_out, strides=strides, padding=padding,
                     use_bias=use_bias, name=name)


def pooling(batch_size, matrix_size, channels_in, pool_size, *, strides=None,
            padding=Padding.VALID, activation=Activation.RELU, name=None):
    return LayerSpec(LayerKind.POOLING, batch_size, activation, matrix_size=matrix_size,
                     channels_in=channels_in, pool_size=pool_size,
                     strides=pool_size if strides is None else strides, padding=padding,
                     name=name)


def dense(batch_size, dim_input, dim_output, *, activation=Activation.RELU, use_bias=True,
          name=None):
    return LayerSpec(LayerKind.DENSE, batch_size, activation, dim_input=dim_input,
                     dim_output=dim_output, use_bias=use_bias, name=name)


def _spatial_out(size, window, stride, padding):
    if padding == Padding.SAME:
        return math.ceil(size / stride)
    return (size - window) // stride + 1


def infer_output_shape(layer, input_shape):
    """Output shape of ``layer`` applied to ``input_shape``.

    Spatial shapes are ``(height, width, channels)``; dense shapes are
    ``(features,)``.
    """
    input_shape = tuple(input_shape)
    if layer.kind == LayerKind.DENSE:
        return (layer.dim_output,)
    if len(input_shape) != 3:
        raise GeometryError(f"{layer.kind.value} layer needs a (H, W, C) input, got {input_shape}")
    h, w, c = input_shape
    out_h = _spatial_out(h, layer.window, layer.strides, layer.padding)
    out_w = _spatial_out(w, layer.window, layer.strides, layer.padding)
    if out_h <= 0 or out_w <= 0:
        raise GeometryError(
            f"{layer.kind.value} window {layer.window} stride {layer.strides} on "
            f"{h}x{w} gives output {out_h}x{out_w}")
    channels = layer.channels_out if layer.kind == LayerKind.CONV2D else c
    return (out_h, out_w, channels)


def format_shape(shape):
    return "x".join(str(d) for d in shape)


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAGRAD = "adagrad"
    RMSPROP = "rmsprop"
    ADAM = "adam"


@dataclass(frozen=True)
class OptimizerFlags:
    sgd: bool = False
    adagrad: bool = False
    rmsprop: bool = False
    adam: bool = False

    def __post_init__(self):
        if sum(bool(getattr(self, f.name)) for f in fields(self)) != 1:
            raise ValidationError(f"exactly one optimizer flag must be set, got {self}")

    @classmethod
    def of(cls, optimizer):
        return cls(**{Optimizer(optimizer).value: True})

    @property
    def optimizer(self):
        return next(Optimizer(f.name) for f in fields(self) if getattr(self, f.name))

    def as_list(self):
        return [float(getattr(self, f.name)) for f in fields(self)]


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    basic_clock_mhz: float
    cuda_cores: int
    memory_clock_mhz: float
    memory_bandwidth_gbs: float
    peak_tflops: float

    def __post_init__(self):
        for f in fields(self)[1:]:
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                raise ValidationError(f"device {self.name!r}: {f.name} must be positive, "
                                      f"got {value!r}", field=f.name)

    def hardware_features(self):
        return [float(self.basic_clock_mhz), float(self.cuda_cores),
                float(self.memory_clock_mhz), float(self.memory_bandwidth_gbs),
                float(self.peak_tflops)]

    def warn_if_outside_ranges(self):
        for fname, (lo, hi) in HARDWARE_RANGES.items():
            value = getattr(self, fname)
            if not lo <= value <= hi:
                warnings.warn(f"device {self.name!r}: {fname}={value} outside profiled range "
                              f"{lo}-{hi}; prediction is an extrapolation", stacklevel=3)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**data)
        except TypeError as exc:
            raise ParseError(f"bad device record {data!r}: {exc}") from None


def load_devices(path=None):
    """Load a device table; the built-in one holds the five profiled GPUs."""
    if path is None:
        text = resources.files(__package__).joinpath("data/devices.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path or 'devices.json'}: {exc}") from None
    return {d["name"]: DeviceSpec.from_dict(d) for d in doc["devices"]}


def get_device(name, path=None):
    devices = load_devices(path)
    try:
        return devices[name]
    except KeyError:
        raise ValidationError(f"unknown device {name!r}; known: {sorted(devices)}") from None


@dataclass(frozen=True)
class Scenario:
    task: Task = Task.INFERENCE
    mode: Mode = Mode.PER_DEVICE
    optimizer: OptimizerFlags | None = None

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "mode", Mode(self.mode))
        if isinstance(self.optimizer, (str, Optimizer)):
            object.__setattr__(self, "optimizer", OptimizerFlags.of(self.optimizer))
        if (self.task == Task.TRAINING) != (self.optimizer is not None):
            raise ValidationError("an optimizer is required for training and only for training")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    batch_size: int
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValidationError(f"network {self.name!r} has no layers")
        for i, layer in enumerate(self.layers):
            if layer.batch_size != self.batch_size:
                raise ValidationError(
                    f"batch_size {layer.batch_size} differs from network batch_size "
                    f"{self.batch_size}", layer_index=i, field="batch_size")
        self.shape_chain()

    def shape_chain(self):
        """Input shape of every layer, checking adjacent layers agree."""
        shapes = [self.layers[0].input_shape]
        for i in range(1, len(self.layers)):
            prev, layer = self.layers[i - 1], self.layers[i]
            produced = prev.output_shape
            expected = layer.input_shape
            if layer.kind == LayerKind.DENSE and len(produced) == 3:
                compatible = math.prod(produced) == layer.dim_input
            else:
                compatible = produced == expected
            if not compatible:
                raise ShapeMismatchError(
                    f"layer {i - 1} ({_label(prev, i - 1)}) outputs {format_shape(produced)} "
                    f"but layer {i} ({_label(layer, i)}) expects {format_shape(expected)}",
                    upstream=i - 1, downstream=i)
            shapes.append(produced)
        return shapes

    def with_batch_size(self, batch_size):
        return NetworkSpec(self.name, batch_size,
                           tuple(layer.with_batch_size(batch_size) for layer in self.layers))

    def range_violations(self):
        return [(i, v) for i, layer in enumerate(self.layers) for v in layer.range_violations()]


def _label(layer, index):
    return layer.name or f"{layer.kind.value}#{index}"


_ENUM_NAMES = {
    "padding": {"valid": Padding.VALID, "same": Padding.SAME},
    "activation": {"none": Activation.NONE, "relu": Activation.RELU},
}


def _decode_enum(fname, value, index):
    table = _ENUM_NAMES[fname]
    if isinstance(value, str) and value.lower() in table:
        return table[value.lower()]
    if isinstance(value, int) and not isinstance(value, bool) and value in (0, 1):
        return list(table.values())[value]
    raise ValidationError(f"{fname} must be one of {sorted(table)}, got {value!r}",
                          layer_index=index, field=fname)


def layer_from_dict(data, batch_size, index=None):
    if not isinstance(data, dict):
        raise ParseError(f"layer {index}: expected an object, got {type(data).__name__}")
    data = dict(data)
    try:
        kind = LayerKind(data.pop("kind"))
    except (KeyError, ValueError):
        raise ValidationError(f"kind must be one of {[k.value for k in LayerKind]}",
                              layer_index=index, field="kind") from None
    allowed = set(KIND_FIELDS[kind]) | {"name"}
    unknown = set(data) - allowed
    if unknown:
        raise ValidationError(f"unknown field(s) {sorted(unknown)} for {kind.value}",
                              layer_index=index, field=sorted(unknown)[0])
    for fname in ("padding", "activation"):
        if fname in data:
            data[fname] = _decode_enum(fname, data[fname], index)
    data.setdefault("activation", Activation.RELU)
    if kind != LayerKind.DENSE:
        data.setdefault("padding", Padding.VALID)
    if kind == LayerKind.POOLING:
        data.setdefault("strides", data.get("pool_size"))
    elif kind == LayerKind.CONV2D:
        data.setdefault("strides", 1)
    if kind != LayerKind.POOLING:
        data.setdefault("use_bias", True)
    try:
        return LayerSpec(kind=kind, batch_size=batch_size, **data)
    except ValidationError as exc:
        raise type(exc)(str(exc), layer_index=index, field=exc.field) from None


def layer_to_dict(layer):
    out = {"kind": layer.kind.value}
    if layer.name is not None:
        out["name"] = layer.name
    for fname in KIND_FIELDS[layer.kind]:
        value = getattr(layer, fname)
        if fname == "padding":
            value = "same" if value == Padding.SAME else "valid"
        elif fname == "activation":
            value = "relu" if value == Activation.RELU else "none"
        out[fname] = value
    return out


def network_from_dict(doc, *, allow_extrapolation=False, source="<network>"):
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: top level must be an object")
    version = doc.get("format_version")
    if version != NETWORK_FORMAT_VERSION:
        raise ParseError(f"{source}: unsupported format_version {version!r} "
                         f"(expected {NETWORK_FORMAT_VERSION})")
    for key in ("name", "batch_size", "layers"):
        if key not in doc:
            raise ParseError(f"{source}: missing key {key!r}")
    batch_size = doc["batch_size"]
    if isinstance(batch_size, bool) or not isinstance(batch_size, int) or batch_size < 1:
        raise ValidationError(f"batch_size must be a positive integer, got {batch_size!r}",
                              field="batch_size")
    if not isinstance(doc["layers"], list):
        raise ParseError(f"{source}: 'layers' must be a list")
    layers = [layer_from_dict(d, batch_size, i) for i, d in enumerate(doc["layers"])]
    net = NetworkSpec(str(doc["name"]), batch_size, tuple(layers))
    for i, (fname, value, (lo, hi)) in net.range_violations():
        message = f"{fname}={value} outside range {lo}-{hi}"
        if not allow_extrapolation:
            raise ValidationError(message, layer_index=i, field=fname)
        warnings.warn(f"{source}: layer {i}: {message}; prediction is an extrapolation",
                      stacklevel=2)
    return net


def network_to_dict(net):
    return {
        "format_version": NETWORK_FORMAT_VERSION,
        "name": net.name,
        "batch_size": net.batch_size,
        "layers": [layer_to_dict(layer) for layer in net.layers],
    }


def parse_network_file(path, *, allow_extrapolation=False):
    """Read and validate a network JSON file.

    With ``allow_extrapolation`` the per-field sampling ranges only warn;
    structural and shape errors still raise.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return network_from_dict(doc, allow_extrapolation=allow_extrapolation, source=str(path))


def dump_network(net, path):
    Path(path).write_text(json.dumps(network_to_dict(net), indent=2) + "\n")


BUILTIN_NETWORKS = ("lenet5", "alexnet", "vgg16")


def builtin_network_path(name):
    return resources.files(__package__).joinpath(f"data/networks/{name}.json")


def load_builtin_network(name, **kwargs):
    with resources.as_file(builtin_network_path(name)) as path:
        return parse_network_file(path, **kwargs)
