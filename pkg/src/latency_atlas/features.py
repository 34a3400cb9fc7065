"""Feature layouts and layer featurization.

Each (layer kind, task, mode) triple has its own fixed layout. The column
order below is a compatibility contract: trained bundles store the layout
id and expect features in exactly this order.

=========  ==================================================================
kind       base columns
=========  ==================================================================
conv2d     batch_size, matrix_size, kernel_size, channels_in, channels_out,
           strides, padding, activation, bias
pooling    batch_size, matrix_size, channels_in, strides, padding,
           activation, pool_size
dense      batch_size, dim_input, dim_output, activation, bias
=========  ==================================================================

Training layouts append ``sgd, adagrad, rmsprop, adam`` (one-hot), and
unseen-device layouts then append ``basic_clock_mhz, cuda_cores,
memory_clock_mhz, memory_bandwidth_gbs, peak_tflops``. Padding is 0 for
valid and 1 for same; activation is 0 for none and 1 for ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import LayoutMismatchError, ValidationError
from .netspec import LayerKind, Mode, Task

BASE_FEATURES = {
    LayerKind.CONV2D: ("batch_size", "matrix_size", "kernel_size", "channels_in",
                       "channels_out", "strides", "padding", "activation", "bias"),
    LayerKind.POOLING: ("batch_size", "matrix_size", "channels_in", "strides", "padding",
                        "activation", "pool_size"),
    LayerKind.DENSE: ("batch_size", "dim_input", "dim_output", "activation", "bias"),
}
OPTIMIZER_FEATURES = ("sgd", "adagrad", "rmsprop", "adam")
HARDWARE_FEATURES = ("basic_clock_mhz", "cuda_cores", "memory_clock_mhz",
                     "memory_bandwidth_gbs", "peak_tflops")


@dataclass(frozen=True)
class LayoutId:
    kind: LayerKind
    task: Task = Task.INFERENCE
    mode: Mode = Mode.PER_DEVICE

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "mode", Mode(self.mode))

    def __str__(self):
        text = f"{self.kind.value}-{self.task.value}"
        return text + "-unseen" if self.mode == Mode.UNSEEN else text

    @classmethod
    def parse(cls, text):
        if isinstance(text, LayoutId):
            return text
        parts = str(text).split("-")
        try:
            if len(parts) == 3 and parts[2] == "unseen":
                return cls(parts[0], parts[1], Mode.UNSEEN)
            if len(parts) == 2:
                return cls(parts[0], parts[1])
        except ValueError:
            pass
        raise ValidationError(f"unknown layout id {text!r}")

    @property
    def width(self):
        return len(feature_names(self))

    def per_device(self):
        return LayoutId(self.kind, self.task, Mode.PER_DEVICE)

    def unseen(self):
        return LayoutId(self.kind, self.task, Mode.UNSEEN)


def layout_for(kind, scenario):
    return LayoutId(kind, scenario.task, scenario.mode)


def feature_names(layout):
    layout = LayoutId.parse(layout)
    names = list(BASE_FEATURES[layout.kind])
    if layout.task == Task.TRAINING:
        names += OPTIMIZER_FEATURES
    if layout.mode == Mode.UNSEEN:
        names += HARDWARE_FEATURES
    return names


@dataclass(frozen=True)
class FeatureVector:
    values: tuple
    layout_id: LayoutId

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != self.layout_id.width:
            raise LayoutMismatchError(f"{self.layout_id} expects {self.layout_id.width} "
                                      f"values, got {len(self.values)}")

    @property
    def length(self):
        return len(self.values)

    def __len__(self):
        return len(self.values)


def _base_values(layer):
    if layer.kind == LayerKind.CONV2D:
        return [layer.batch_size, layer.matrix_size, layer.kernel_size, layer.channels_in,
                layer.channels_out, layer.strides, int(layer.padding), int(layer.activation),
                int(layer.use_bias)]
    if layer.kind == LayerKind.POOLING:
        return [layer.batch_size, layer.matrix_size, layer.channels_in, layer.strides,
                int(layer.padding), int(layer.activation), layer.pool_size]
    return [layer.batch_size, layer.dim_input, layer.dim_output, int(layer.activation),
            int(layer.use_bias)]


def featurize(layer, scenario, device=None):
    if (scenario.mode == Mode.UNSEEN) != (device is not None):
        raise ValidationError("a device is required in unseen mode and only in unseen mode")
    values = _base_values(layer)
    if scenario.task == Task.TRAINING:
        values += scenario.optimizer.as_list()
    if device is not None:
        device.warn_if_outside_ranges()
        values += device.hardware_features()
    return FeatureVector(tuple(values), layout_for(layer.kind, scenario))


def append_hardware(values, device):
    """Extend a per-device feature row with the device's hardware columns."""
    return list(values) + device.hardware_features()
