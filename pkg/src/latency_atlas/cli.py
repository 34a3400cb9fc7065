"""``latency-atlas`` command line: gen, measure, split, train, evaluate, predict.

Exit codes: 0 success, 1 usage or validation error, 2 data-contract
violation, 3 internal error.

A JSON config file (``--config`` or ``$LATENCY_ATLAS_CONFIG``) may pin
``{"oracle": {...}, "architecture": {...}, "train": {...}}`` overrides.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import bench, compose, metrics, models
from .errors import DataContractError, LatencyAtlasError, UsageError, ValidationError
from .netspec import (BUILTIN_NETWORKS, LayerKind, Mode, Scenario, Task, load_builtin_network,
                      load_devices, parse_network_file)

log = logging.getLogger("latency_atlas")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CONFIG_ENV = "LATENCY_ATLAS_CONFIG"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"batch sizes must be positive, got {text!r}")
    return values


def load_config(path):
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        config = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise DataContractError(f"{path}: {exc}") from None
    unknown = set(config) - {"oracle", "architecture", "train"}
    if unknown:
        raise UsageError(f"{path}: unknown config section(s) {sorted(unknown)}")
    return config


def _devices(args):
    return load_devices(getattr(args, "device_file", None))


def _device(args, name):
    devices = _devices(args)
    if name not in devices:
        raise ValidationError(f"unknown device {name!r}; known: {sorted(devices)}")
    return devices[name]


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    elif not args.quiet:
        print(text)


# --------------------------------------------------------------------------
# Subcommands


def cmd_gen(args, config):
    scenario = Scenario(args.task, optimizer="sgd" if args.task == "training" else None)
    suite = bench.generate_suite(args.kind, scenario, args.count, args.seed)
    try:
        path = bench.save_suite(suite, args.kind, args.task, args.seed, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write suite to {args.out}: {exc}") from None
    _emit(args, {"suite": str(path), "count": len(suite), "kind": args.kind, "task": args.task},
          f"wrote {len(suite)} {args.kind} {args.task} benchmarks to {path}")


def cmd_measure(args, config):
    if (args.oracle is None) == (args.ingest is None):
        raise UsageError("give exactly one of --oracle or --ingest")
    if args.oracle is not None:
        if args.suite is None:
            raise UsageError("--oracle needs --suite")
        if args.device is None:
            raise UsageError("--oracle needs --device")
        profile = bench.OracleProfile.from_dict(config.get("oracle", {}))
        if args.oracle != "default":
            profile = bench.OracleProfile.load(args.oracle)
        _, _, suite = bench.load_suite(args.suite)
        ds = bench.measure_suite(suite, _device(args, args.device), noise_seed=args.seed,
                                 noise_cv=args.noise_cv, repeats=args.repeats, profile=profile,
                                 workers=args.workers)
    else:
        if args.layout:
            layout = args.layout
        elif args.suite:
            kind, task, _ = bench.load_suite(args.suite)
            layout = f"{kind.value}-{task.value}"
        else:
            raise UsageError("--ingest needs --layout or --suite to know the column layout")
        if not Path(args.ingest).exists():
            raise DataContractError(f"measurement file {args.ingest} does not exist")
        ds = bench.ingest_profile_csv(args.ingest, layout, _devices(args))
    bench.save_dataset(ds, args.out)
    max_used = max(s.repeats_used for s in ds.samples)
    _emit(args, {"dataset": str(args.out), "n_samples": len(ds), "layout": str(ds.layout_id),
                 "devices": ds.device_names, "max_repeats_used": max_used},
          f"wrote {len(ds)} samples ({ds.layout_id}, devices {ds.device_names}) to {args.out}")


def cmd_split(args, config):
    ds = bench.load_dataset(args.data)
    train, test = bench.split_dataset(ds, args.fraction, args.seed)
    bench.save_dataset(train, args.train_out)
    bench.save_dataset(test, args.test_out)
    _emit(args, {"train": len(train), "test": len(test)},
          f"split {len(ds)} samples into {len(train)} train / {len(test)} test")


def _train_config(args, config):
    base = models.FULL_TRAIN_CONFIG if args.full else models.DEFAULT_TRAIN_CONFIG
    overrides = dict(config.get("train", {}))
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
        if "halve_every" not in overrides:
            overrides["halve_every"] = max(1, round(args.epochs * 0.4))
    if args.lr is not None:
        overrides["lr0"] = args.lr
    return models.TrainConfig(**{**base.__dict__, **overrides})


def cmd_train(args, config):
    datasets = [bench.load_dataset(p) for p in args.data]
    tasks = {ds.layout_id.task for ds in datasets}
    if len(tasks) != 1:
        raise UsageError(f"datasets mix tasks {sorted(t.value for t in tasks)}")
    task = tasks.pop()
    by_kind = {}
    for ds in datasets:
        if ds.layout_id.mode != Mode.PER_DEVICE:
            raise UsageError(f"train expects per-device datasets, got {ds.layout_id}")
        by_kind.setdefault(ds.layout_id.kind, []).append(ds)
    missing = [k.value for k in LayerKind if k not in by_kind]
    if missing:
        raise UsageError(f"no training data for layer kind(s) {missing}")
    devices = sorted({name for ds in datasets for name in ds.device_names})
    registry = _devices(args)
    for ds in datasets:
        registry.update(ds.devices)
    if args.unseen:
        mode = Mode.UNSEEN
        for kind, group in by_kind.items():
            names = {n for ds in group for n in ds.device_names}
            if len(names) < 2:
                raise UsageError(f"--unseen needs {kind.value} data from at least two devices, "
                                 f"got {sorted(names)}")
        pooled = {k: bench.pool_datasets([ds.to_unseen(registry) for ds in g])
                  for k, g in by_kind.items()}
        device, pool = None, [registry[n] for n in devices]
    else:
        mode = Mode.PER_DEVICE
        if len(devices) != 1:
            raise UsageError(f"per-device training needs data from one device, got {devices}; "
                             f"use --unseen to pool devices")
        if args.device and args.device != devices[0]:
            raise UsageError(f"--device {args.device} but the data was measured on {devices[0]}")
        pooled = {k: bench.pool_datasets(g) for k, g in by_kind.items()}
        device, pool = registry.get(devices[0]), []
    arch_config = models.ArchitectureConfig.from_dict(config.get("architecture", {}))
    bundle = models.train_bundle(pooled, task=task, mode=mode, arch=args.arch, loss=args.loss,
                                 config=_train_config(args, config), seed=args.seed,
                                 jobs=args.jobs, device=device, pool=pool,
                                 arch_config=arch_config)
    models.save_bundle(bundle, args.out)
    summary = {f"{k.value}/{p}": m.training_meta["final_train_loss"]
               for (k, p), m in bundle.models.items()}
    _emit(args, {"bundle": str(args.out), "task": task.value, "mode": mode.value,
                 **bundle.descriptor, "final_train_loss": summary},
          f"wrote {mode.value} {task.value} bundle ({bundle.descriptor}) to {args.out}")


def cmd_evaluate(args, config):
    bundle = models.load_bundle(args.bundle)
    datasets = [bench.load_dataset(p) for p in args.data]
    report = metrics.evaluate_bundle(bundle, datasets)
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit(args, report.to_dict(), report.render())


def cmd_predict(args, config):
    bundle = models.load_bundle(args.bundle)
    task = Task(args.task) if args.task else bundle.task
    if task == Task.TRAINING and args.optimizer is None:
        raise UsageError("training predictions need --optimizer")
    if task == Task.INFERENCE and args.optimizer is not None:
        raise UsageError("--optimizer only applies to training predictions")
    scenario = Scenario(task, optimizer=args.optimizer)
    device = None
    if bundle.mode == Mode.UNSEEN:
        if not args.device:
            raise UsageError("this bundle predicts unseen devices; pass --device")
        device = _device(args, args.device)
    bundle.check_scenario(scenario, device)
    network_path = Path(args.network)
    if network_path.exists():
        net = parse_network_file(network_path, allow_extrapolation=args.allow_extrapolation)
    elif args.network in BUILTIN_NETWORKS:
        net = load_builtin_network(args.network, allow_extrapolation=args.allow_extrapolation)
    else:
        raise DataContractError(f"network file {network_path} does not exist")
    sizes = args.batch_sweep or [net.batch_size]
    results, texts = [], []
    for size in sizes:
        sized = net.with_batch_size(size)
        breakdown = compose.predict_single_batch(sized, bundle, scenario, device)
        entry = breakdown.to_dict()
        text = breakdown.render()
        if args.epoch_n:
            entry["epoch_ms"] = compose.epoch_time(breakdown.total_ms, args.epoch_n, size)
            text += f"\nepoch of {args.epoch_n} samples (ms): {entry['epoch_ms']:.4f}"
        results.append(entry)
        texts.append(f"batch size {size}\n{text}")
    payload = results[0] if args.batch_sweep is None else {"sweep": results}
    _emit(args, payload, "\n\n".join(texts))


# --------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON config file (default: $LATENCY_ATLAS_CONFIG)")
    common.add_argument("--device-file", help="JSON device table (default: built-in table)")
    out = common.add_mutually_exclusive_group()
    out.add_argument("--quiet", action="store_true")
    out.add_argument("--json", action="store_true", help="machine-readable output on stdout")

    parser = _Parser(prog="latency-atlas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a microbenchmark suite")
    p.add_argument("--kind", required=True, choices=[k.value for k in LayerKind])
    p.add_argument("--task", default="inference", choices=[t.value for t in Task])
    p.add_argument("--count", required=True, type=_positive_int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("measure", parents=[common], help="time a suite into a dataset")
    p.add_argument("--suite")
    p.add_argument("--oracle", nargs="?", const="default",
                   help="use the synthetic oracle, optionally with a profile JSON")
    p.add_argument("--ingest", help="measurement CSV to ingest instead of the oracle")
    p.add_argument("--layout", help="feature layout of the ingested CSV, e.g. conv2d-inference")
    p.add_argument("--device")
    p.add_argument("--repeats", type=_positive_int, default=bench.DEFAULT_REPEATS)
    p.add_argument("--noise-cv", type=float, default=0.0)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("split", parents=[common], help="shuffle-split a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train the nine phase models")
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--arch", choices=[a.value for a in models.ArchitectureId])
    p.add_argument("--loss", choices=["maple", "msle"])
    target = p.add_mutually_exclusive_group()
    target.add_argument("--device")
    target.add_argument("--unseen", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--full", action="store_true", help="1000 epochs, halving every 400")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score a bundle on held-out data")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="predict a network's latency")
    p.add_argument("--bundle", required=True)
    p.add_argument("--network", required=True,
                   help="network JSON file, or a built-in name: " + ", ".join(BUILTIN_NETWORKS))
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--optimizer", choices=["sgd", "adagrad", "rmsprop", "adam"])
    p.add_argument("--device")
    p.add_argument("--epoch-n", type=_positive_int)
    p.add_argument("--batch-sweep", type=_int_list)
    p.add_argument("--allow-extrapolation", action="store_true",
                   help="warn instead of failing on layer fields outside the sampled ranges")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet or args.json else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                args.func(args, load_config(args.config))
            finally:
                for w in caught:
                    print(f"warning: {w.message}", file=sys.stderr)
    except (UsageError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataContractError, LatencyAtlasError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
