"""PerfNet / PerfNetV2 regressors, their training loop, and predictor bundles.

Bundle archive layout (little-endian throughout)::

    8 bytes   magic  b"LATBNDL\\0"
    8 bytes   uint64 manifest length N
    N bytes   manifest, UTF-8 JSON (format_version, metadata, blob table)
    ...       blobs: flat float64 arrays, offsets relative to the blob area
    32 bytes  SHA-256 of everything above

The manifest records each blob's offset, shape and the SHA-256 of its bytes.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import nn
from .bench import PHASES
from .errors import (BundleVersionError, ChecksumError, DomainError, LayoutMismatchError,
                     UsageError, ValidationError)
from .features import LayoutId, featurize
from .netspec import DeviceSpec, LayerKind, Mode, Task

log = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = 1
BUNDLE_MAGIC = b"LATBNDL\0"


class ArchitectureId(str, enum.Enum):
    PERFNET = "perfnet"
    PERFNETV2 = "perfnetv2"


@dataclass(frozen=True)
class ArchitectureConfig:
    """Layer widths. The dense widths are a documented choice, not a measured one."""

    v2_conv_channels: tuple = (32, 128)
    v2_conv_kernels: tuple = (3, 2)
    v2_dense_widths: tuple = (256, 128, 64, 48, 32)
    perfnet_dense_widths: tuple = (256, 128, 64, 32)
    dropout: float = 0.3

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


DEFAULT_ARCHITECTURE = ArchitectureConfig()


def build_architecture(arch, input_width, config=DEFAULT_ARCHITECTURE):
    """Layer list for ``arch`` with zero weights; call :func:`nn.init_network` to initialize."""
    arch = ArchitectureId(arch)
    layers = []
    width = input_width
    if arch == ArchitectureId.PERFNETV2:
        length, channels = input_width, 1
        for out_channels, kernel in zip(config.v2_conv_channels, config.v2_conv_kernels):
            length = length - kernel + 1
            if length < 1:
                need = sum(k - 1 for k in config.v2_conv_kernels) + 1
                raise ValidationError(f"PerfNetV2 needs input width >= {need}, "
                                      f"got {input_width}")
            layers += [nn.Conv1D(channels, out_channels, kernel), nn.Relu()]
            channels = out_channels
        layers.append(nn.Flatten())
        width = length * channels
        widths = config.v2_dense_widths
    else:
        widths = config.perfnet_dense_widths
    for n_out in widths:
        layers += [nn.Dense(width, n_out), nn.Relu()]
        width = n_out
    layers += [nn.Dropout(config.dropout), nn.Dense(width, 1), nn.Softplus()]
    return layers


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr0: float = 1e-3
    halve_every: int = 80
    record_history: bool = False

    def lr(self, epoch):
        return self.lr0 / 2 ** (epoch // self.halve_every)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


DEFAULT_TRAIN_CONFIG = TrainConfig()
FULL_TRAIN_CONFIG = TrainConfig(epochs=1000, halve_every=400)


@dataclass
class PhaseModel:
    architecture: ArchitectureId
    layout_id: LayoutId
    phase: str
    scaler: nn.StandardScaler
    net: list
    loss: str = "maple"
    training_meta: dict = field(default_factory=dict)

    def predict_many(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.layout_id.width:
            raise LayoutMismatchError(f"model for {self.layout_id} expects "
                                      f"{self.layout_id.width} features, got shape {X.shape}")
        return nn.predict(self.net, self.scaler.transform(X)).ravel()


def _loss_fn(name):
    try:
        return nn.LOSSES[name]
    except KeyError:
        raise UsageError(f"unknown loss {name!r}; choose from {sorted(nn.LOSSES)}") from None


def _evaluate_loss(net, X, y, loss):
    if len(y) == 0:
        return None
    return loss(nn.predict(net, X).ravel(), y)[0]


def train_phase_model(ds_train, phase, arch=ArchitectureId.PERFNETV2, loss="maple",
                      config=DEFAULT_TRAIN_CONFIG, seed=0, ds_val=None,
                      arch_config=DEFAULT_ARCHITECTURE):
    """Fit one phase regressor with mini-batch Adam and the step-halving schedule."""
    if phase not in PHASES:
        raise ValidationError(f"phase must be one of {PHASES}, got {phase!r}")
    if len(ds_train) == 0:
        raise ValidationError("empty training set")
    loss_fn = _loss_fn(loss)
    X = ds_train.features()
    y = ds_train.targets(phase)
    if loss == "maple" and np.any(y <= 0):
        raise DomainError(f"MAPLE needs strictly positive {phase} targets; "
                          f"{int(np.sum(y <= 0))} sample(s) are zero")
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    scaler = nn.scaler_fit(X)
    Xs = scaler.transform(X)
    net = nn.init_network(build_architecture(arch, X.shape[1], arch_config), init_seq)
    params = nn.parameters(net)
    state = nn.adam_init(params)
    rng = np.random.default_rng(shuffle_seq)
    history = []
    started = time.perf_counter()
    n = len(y)
    for epoch in range(config.epochs):
        lr = config.lr(epoch)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out, cache = nn.forward(net, Xs[idx], training=True,
                                    dropout_seed=int(rng.integers(2 ** 63)))
            _, dout = loss_fn(out.ravel(), y[idx])
            grads = nn.backward(net, cache, dout.reshape(-1, 1))
            nn.adam_step(params, nn.flat_gradients(net, grads), state, lr)
        if config.record_history:
            history.append(_evaluate_loss(net, Xs, y, loss_fn))
    meta = {
        "seed": seed,
        "epochs": config.epochs,
        "config": {k: v for k, v in config.__dict__.items() if k != "record_history"},
        "n_train": n,
        "final_train_loss": _evaluate_loss(net, Xs, y, loss_fn),
        "final_val_loss": None,
    }
    log.info("trained %s/%s %s in %.1fs, final loss %.5g", ds_train.layout_id, phase,
             ArchitectureId(arch).value, time.perf_counter() - started, meta["final_train_loss"])
    if ds_val is not None and len(ds_val):
        meta["final_val_loss"] = _evaluate_loss(net, scaler.transform(ds_val.features()),
                                                ds_val.targets(phase), loss_fn)
    if config.record_history:
        meta["history"] = history
    return PhaseModel(ArchitectureId(arch), ds_train.layout_id, phase, scaler, net, loss, meta)


def predict_phase(model, fv):
    if fv.layout_id != model.layout_id:
        raise LayoutMismatchError(f"feature layout {fv.layout_id} does not match model layout "
                                  f"{model.layout_id}")
    return float(model.predict_many(np.array([fv.values]))[0])


# --------------------------------------------------------------------------
# Bundles


@dataclass
class PredictorBundle:
    """The nine phase models (3 layer kinds x 3 phases) for one device or device pool."""

    task: Task
    mode: Mode
    models: dict
    device: DeviceSpec | None = None
    pool: list = field(default_factory=list)
    created_at: str = ""
    format_version: int = BUNDLE_FORMAT_VERSION

    def __post_init__(self):
        self.task, self.mode = Task(self.task), Mode(self.mode)
        expected = {(k, p) for k in LayerKind for p in PHASES}
        keys = {(LayerKind(k), p) for k, p in self.models}
        if keys != expected:
            missing = sorted(f"{k.value}/{p}" for k, p in expected - keys)
            raise ValidationError(f"bundle is missing phase models: {missing}")
        for (kind, phase), model in self.models.items():
            want = LayoutId(kind, self.task, self.mode)
            if model.layout_id != want or model.phase != phase:
                raise LayoutMismatchError(f"model under {kind}/{phase} has layout "
                                          f"{model.layout_id}/{model.phase}, expected {want}")

    @property
    def descriptor(self):
        if self.mode == Mode.UNSEEN:
            return {"pool": [d.name for d in self.pool]}
        return {"device": self.device.name if self.device else None}

    def model(self, kind, phase):
        try:
            return self.models[(LayerKind(kind), phase)]
        except KeyError:
            raise ValidationError(f"bundle has no {LayerKind(kind).value}/{phase} model") from None

    def check_scenario(self, scenario, device=None):
        if scenario.task != self.task:
            raise UsageError(f"bundle predicts {self.task.value} time, scenario asks for "
                             f"{scenario.task.value}")
        if self.mode == Mode.UNSEEN and device is None:
            raise UsageError("an unseen-device bundle needs a target device description")

    def scenario_for(self, scenario):
        return replace(scenario, mode=self.mode)

    def predict_layer(self, layer, scenario, device=None):
        """Predicted ``(t_pre, t_exe, t_post)`` for one layer, in milliseconds."""
        self.check_scenario(scenario, device)
        fv = featurize(layer, self.scenario_for(scenario),
                       device if self.mode == Mode.UNSEEN else None)
        return tuple(predict_phase(self.model(layer.kind, p), fv) for p in PHASES)


def train_bundle(datasets, *, task, mode=Mode.PER_DEVICE, arch=None, loss=None,
                 config=DEFAULT_TRAIN_CONFIG, seed=0, jobs=1, device=None, pool=(),
                 arch_config=DEFAULT_ARCHITECTURE, created_at=None, validation=None):
    """Train all nine phase models from one training dataset per layer kind.

    ``datasets`` maps each :class:`LayerKind` to a dataset in the layout the
    bundle needs. Each model's seed is derived from ``seed``, the kind and the
    phase, so results do not depend on ``jobs``.
    """
    mode = Mode(mode)
    if arch is None:
        arch = ArchitectureId.PERFNET if mode == Mode.UNSEEN else ArchitectureId.PERFNETV2
    if loss is None:
        loss = "msle" if mode == Mode.UNSEEN else "maple"
    validation = validation or {}
    jobs_list = []
    for k_index, kind in enumerate(LayerKind):
        if kind not in datasets:
            raise UsageError(f"no {kind.value} training data")
        ds = datasets[kind]
        want = LayoutId(kind, task, mode)
        if ds.layout_id != want:
            raise LayoutMismatchError(f"{kind.value} data has layout {ds.layout_id}, "
                                      f"expected {want}")
        for p_index, phase in enumerate(PHASES):
            model_seed = [seed, k_index, p_index]
            jobs_list.append((kind, phase, ds, model_seed))

    def run(job):
        kind, phase, ds, model_seed = job
        model = train_phase_model(ds, phase, arch, loss, config,
                                  int(np.random.SeedSequence(model_seed).generate_state(1)[0]),
                                  validation.get(kind), arch_config)
        model.training_meta["seed"] = model_seed
        return (kind, phase), model

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            models = dict(ex.map(run, jobs_list))
    else:
        models = dict(run(j) for j in jobs_list)
    return PredictorBundle(task, mode, models, device, list(pool),
                           created_at or default_created_at())


def default_created_at():
    """UTC timestamp; honours ``SOURCE_DATE_EPOCH`` for reproducible archives."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = (datetime.fromtimestamp(int(epoch), timezone.utc) if epoch
              else datetime.now(timezone.utc).replace(microsecond=0))
    return moment.isoformat()


def _model_manifest(model, blobs, payload):
    def add(arr):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entry = {"offset": sum(len(b) for b in payload), "shape": list(arr.shape),
                 "sha256": hashlib.sha256(data).hexdigest()}
        payload.append(data)
        blobs.append(entry)
        return len(blobs) - 1

    layers = []
    for layer in model.net:
        rec = {"config": layer.config()}
        if layer.params:
            rec["params"] = {name: add(layer.params[name]) for name in sorted(layer.params)}
        layers.append(rec)
    return {
        "architecture": model.architecture.value,
        "layout": str(model.layout_id),
        "phase": model.phase,
        "loss": model.loss,
        "scaler": {"means": add(model.scaler.means), "stds": add(model.scaler.stds),
                   "constant": [bool(c) for c in model.scaler.constant]},
        "layers": layers,
        "training_meta": model.training_meta,
    }


def save_bundle(bundle, path):
    blobs, payload = [], []
    models = []
    for kind in LayerKind:
        for phase in PHASES:
            entry = _model_manifest(bundle.model(kind, phase), blobs, payload)
            entry["kind"] = kind.value
            models.append(entry)
    manifest = {
        "format_version": bundle.format_version,
        "task": bundle.task.value,
        "mode": bundle.mode.value,
        "device": bundle.device.to_dict() if bundle.device else None,
        "pool": [d.to_dict() for d in bundle.pool],
        "created_at": bundle.created_at,
        "blobs": blobs,
        "models": models,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = BUNDLE_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_bundle(path):
    raw = Path(path).read_bytes()
    if len(raw) < len(BUNDLE_MAGIC) + 8 + 32 or not raw.startswith(BUNDLE_MAGIC):
        raise ChecksumError(f"{path}: not a bundle archive or truncated")
    (head_len,) = struct.unpack_from("<Q", raw, len(BUNDLE_MAGIC))
    start = len(BUNDLE_MAGIC) + 8
    try:
        manifest = json.loads(raw[start:start + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ChecksumError(f"{path}: corrupted manifest") from None
    version = manifest.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise BundleVersionError(f"{path}: bundle format_version {version!r}, this build reads "
                                 f"{BUNDLE_FORMAT_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupted archive)")
    blob_area = body[start + head_len:]

    def blob(index):
        entry = manifest["blobs"][index]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        data = blob_area[entry["offset"]:entry["offset"] + 8 * count]
        if len(data) != 8 * count or hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise ChecksumError(f"{path}: blob {index} failed its checksum")
        return np.frombuffer(data, dtype="<f8").astype(float).reshape(entry["shape"])

    models = {}
    for rec in manifest["models"]:
        net = []
        for layer_rec in rec["layers"]:
            layer = nn.layer_from_config(layer_rec["config"])
            for name, index in layer_rec.get("params", {}).items():
                layer.params[name] = blob(index)
            net.append(layer)
        scaler = nn.StandardScaler(blob(rec["scaler"]["means"]), blob(rec["scaler"]["stds"]),
                                   np.array(rec["scaler"]["constant"], dtype=bool))
        model = PhaseModel(ArchitectureId(rec["architecture"]), LayoutId.parse(rec["layout"]),
                           rec["phase"], scaler, net, rec["loss"], rec["training_meta"])
        models[(LayerKind(rec["kind"]), rec["phase"])] = model
    device = DeviceSpec.from_dict(manifest["device"]) if manifest["device"] else None
    pool = [DeviceSpec.from_dict(d) for d in manifest["pool"]]
    return PredictorBundle(manifest["task"], manifest["mode"], models, device, pool,
                           manifest["created_at"], version)
