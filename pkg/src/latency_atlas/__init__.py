"""Predict CNN layer and network latency on GPUs from learned per-phase models."""

from .compose import naive_sum, predict_epoch, predict_single_batch
from .features import FeatureVector, LayoutId, feature_names, featurize
from .models import (ArchitectureId, PredictorBundle, load_bundle, save_bundle,
                     train_bundle, train_phase_model)
from .netspec import (DeviceSpec, LayerKind, LayerSpec, NetworkSpec, Scenario, Task,
                      load_devices, parse_network_file)

__version__ = "0.1.0"
