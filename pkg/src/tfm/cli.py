"""Command-line entry point: ``tfm run|overhead|augment-check|eval``."""
import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import hflip, load_dataset, parse_synth_spec
from .errors import ConfigError, TFMError
from .estimator import MethodKind
from .growth import GrowthPolicy
from .harness import (SIZED_FIRST, SPLIT_MODES, avg_accuracy, build_sequence, overhead_csv,
                      run_scenario, task_split, write_run)
from .network import ArchSpec
from .overhead import OVERHEAD_MODELS
from .snapshot import restore
from .tensor import make_rng
from .trainer import TrainerConfig

log = logging.getLogger("tfm")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
ARCH_DIR = os.path.join(os.path.dirname(__file__), "archs")

# desk-scale stand-in: 10 classes sharing an 8-dim latent space inside 64 dims
DEFAULT_SYNTH = {"classes": 10, "dim": 64, "n": 200, "separation": 6.0,
                 "clusters_per_class": 3, "latent_dim": 8}
DEFAULT_HIDDEN = [128, 128]


def default_schedule(num_tasks, first=0.4):
    """``first`` of every layer for task 1, the rest split evenly over later tasks."""
    if num_tasks < 2:
        return [1.0]
    return [first] + [round((1 - first) / (num_tasks - 1), 6)] * (num_tasks - 1)


@dataclass
class RunConfig:
    """Everything a run needs; :meth:`resolve` fills in all defaults."""

    dataset: dict = field(default_factory=dict)
    arch: object = None
    method: str = "tfm"
    sequence: dict = field(default_factory=dict)
    growth: dict = None
    trainer: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "runs/latest"
    hflip: bool = False
    snapshots: bool = True

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def to_dict(self):
        return asdict(self)

    def resolve(self):
        """A fully explicit copy: arch inlined, every default written out."""
        try:
            MethodKind(self.method)
        except ValueError:
            raise ConfigError(f"unknown method {self.method!r}; choose from "
                              f"{[m.value for m in MethodKind]}") from None
        seed = int(self.seed)
        ds = {"path": None, "format": "synth", "options": {}, **self.dataset}
        if ds["format"] == "synth" and not ds["path"]:
            ds["options"] = {**DEFAULT_SYNTH, "seed": seed, **ds["options"]}
        seq = {"mode": "random", "num_tasks": 5, "grouping_file": None, "first_fraction": 0.55,
               "test_fraction": 0.2, "val_fraction": 0.1, **self.sequence}
        if seq["mode"] not in SPLIT_MODES:
            raise ConfigError(f"unknown sequence mode {seq['mode']!r}")
        growth = self.growth
        if growth is None:
            growth = {"mode": "fixed", "schedule": default_schedule(int(seq["num_tasks"]))}
        growth = _build(GrowthPolicy, growth, "growth").to_dict()
        trainer = {**asdict(_build(TrainerConfig, self.trainer, "trainer")), "seed": seed}
        arch = self.arch
        if isinstance(arch, str):
            arch = resolve_arch(arch).to_dict()
        elif isinstance(arch, dict):
            arch = ArchSpec.from_dict(arch).to_dict()
        elif arch is not None:
            raise ConfigError("arch must be a file path, a builtin name or an inline spec")
        return RunConfig(ds, arch, self.method, seq, growth, trainer, seed, self.out,
                         bool(self.hflip), bool(self.snapshots))


def _build(cls, params, what):
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from None


def resolve_arch(name):
    """An architecture file path, or the name of a bundled one (``alexnet-like``)."""
    if os.path.exists(name):
        return ArchSpec.load(name)
    builtin = os.path.join(ARCH_DIR, name if name.endswith(".json") else name + ".json")
    if os.path.exists(builtin):
        return ArchSpec.load(builtin)
    raise ConfigError(f"architecture {name!r} not found")


def load_bundle(cfg):
    ds = cfg.dataset
    return load_dataset(ds["path"], ds["format"], **ds["options"])


def arch_for(cfg, bundle):
    if cfg.arch is not None:
        return ArchSpec.from_dict(cfg.arch)
    if len(bundle.sample_shape) != 1:
        raise ConfigError("image datasets need an explicit arch")
    return ArchSpec.mlp(bundle.sample_shape[0], DEFAULT_HIDDEN)


def sequence_for(cfg, bundle):
    s = cfg.sequence
    return build_sequence(bundle, s["mode"], int(s["num_tasks"]), cfg.seed, s["grouping_file"],
                          s["first_fraction"], s["test_fraction"], s["val_fraction"])


def execute(cfg):
    """Run a resolved config and write its run directory; returns the scenario result."""
    bundle = load_bundle(cfg)
    arch = arch_for(cfg, bundle)
    sequence = sequence_for(cfg, bundle)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    snap_dir = os.path.join(cfg.out, "snapshots") if cfg.snapshots else None
    result = run_scenario(cfg.method, sequence, bundle, arch, GrowthPolicy(**cfg.growth),
                          TrainerConfig(**cfg.trainer), cfg.seed, snapshot_dir=snap_dir,
                          hflip=cfg.hflip)
    write_run(cfg.out, result, cfg.to_dict(), arch)
    return result


def _mark_partial(out, exc):
    if out and os.path.isdir(out):
        with open(os.path.join(out, "PARTIAL"), "w") as fh:
            fh.write(f"run did not finish: {exc}\n")


# -- subcommands -----------------------------------------------------------------------


def cmd_run(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.method:
        cfg.method = args.method
    if args.seed is not None:
        cfg.seed = args.seed
    if args.tasks is not None:
        cfg.sequence = {**cfg.sequence, "num_tasks": args.tasks}
    if args.dataset:
        cfg.dataset = parse_dataset_arg(args.dataset)
    if args.arch:
        cfg.arch = args.arch
    if args.out:
        cfg.out = args.out
    cfg = cfg.resolve()
    partial = os.path.join(cfg.out, "PARTIAL")
    if os.path.exists(partial):
        os.remove(partial)
    try:
        result = execute(cfg)
    except TFMError as exc:
        _mark_partial(cfg.out, exc)
        raise
    _, mean = result.forgetting()
    extra = ""
    if cfg.sequence["mode"] == SIZED_FIRST:
        extra = f" (tasks 2..K: {avg_accuracy(result.matrix, skip_first=True):.4f})"
    print(f"{cfg.method}: average accuracy {result.avg_accuracy():.4f}{extra}, "
          f"mean forgetting {mean:.4f} -> {cfg.out}")
    return 0


def parse_dataset_arg(text):
    """``synth:k=v,...``, ``file.csv``, ``images.idx:labels.idx`` or a synth JSON file."""
    if text.startswith("synth"):
        return {"path": None, "format": "synth", "options": parse_synth_spec(text)}
    if text.endswith(".csv"):
        return {"path": text, "format": "csv", "options": {}}
    if text.endswith(".json"):
        return {"path": text, "format": "synth", "options": {}}
    images, _, labels = text.partition(":")
    return {"path": images, "format": "idx", "options": {"labels_path": labels or None}}


def cmd_overhead(args):
    arch = resolve_arch(args.arch)
    methods = args.methods.split(",") if args.methods else None
    for m in methods or []:
        if m not in OVERHEAD_MODELS:
            raise ConfigError(f"unknown overhead model {m!r}; choose from {sorted(OVERHEAD_MODELS)}")
    text = overhead_csv(arch, args.tasks, methods)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_augment_check(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.dataset:
        cfg.dataset = parse_dataset_arg(args.dataset)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.tasks is not None:
        cfg.sequence = {**cfg.sequence, "num_tasks": args.tasks}
    cfg = cfg.resolve()
    bundle = load_bundle(cfg)
    arch = arch_for(cfg, bundle)
    sequence = sequence_for(cfg, bundle)
    print(f"dataset {bundle.name}: {len(bundle.y)} samples of shape {bundle.sample_shape}, "
          f"{bundle.n_classes} classes")
    print(f"arch input {arch.input_shape}, feature widths {arch.caps}")
    for k, spec in enumerate(sequence.tasks, start=1):
        print(f"task {k}: classes {spec.classes} train {len(spec.train)} val {len(spec.val)} "
              f"test {len(spec.test)}")
    X, _ = task_split(bundle, sequence, 1, "train")
    X = X[:64]
    a = hflip(X, make_rng(cfg.seed))
    b = hflip(X, make_rng(cfg.seed))
    flipped = int(np.sum(np.any(a != X, axis=tuple(range(1, X.ndim))))) if X.ndim > 1 else 0
    print(f"hflip: {'on' if cfg.hflip else 'off'} for training; {flipped}/{len(X)} samples "
          f"changed in a test batch; deterministic={bool(np.array_equal(a, b))}")
    return 0


def _find_config(snapshot_path):
    d = os.path.dirname(os.path.abspath(snapshot_path))
    for cand in (d, os.path.dirname(d)):
        path = os.path.join(cand, "config.json")
        if os.path.exists(path):
            return path
    raise ConfigError(f"no config.json next to {snapshot_path}; pass --config")


def cmd_eval(args):
    snap = args.snapshot
    if not os.path.exists(snap) and os.path.exists(snap + ".tfm"):
        snap += ".tfm"
    if not os.path.exists(snap) and args.config:
        cand = os.path.join(os.path.dirname(args.config), "snapshots", os.path.basename(snap))
        snap = cand if os.path.exists(cand) else cand + ".tfm"
    cfg = RunConfig.load(args.config or _find_config(snap)).resolve()
    net = restore(snap)
    bundle = load_bundle(cfg)
    sequence = sequence_for(cfg, bundle)
    if not 1 <= args.task <= min(net.num_tasks, len(sequence)):
        raise ConfigError(f"task {args.task} is not in this snapshot (1..{net.num_tasks})")
    X, y = task_split(bundle, sequence, args.task, args.split)
    classes = np.asarray(sequence.tasks[args.task - 1].classes)
    pred = classes[net.predict(np.ascontiguousarray(X), args.task).argmax(axis=1)]
    acc = float(np.mean(pred == y))
    print(repr(acc))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="tfm", description="Task-incremental learning with "
                                     "ternary feature masks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--seed", type=int)
        p.add_argument("--tasks", type=int, help="number of tasks")
        p.add_argument("--dataset", help="synth:k=v,..., a CSV file, images.idx:labels.idx")

    p = sub.add_parser("run", help="train a method over a task sequence")
    common(p)
    p.add_argument("--method", choices=[m.value for m in MethodKind])
    p.add_argument("--arch", help="architecture JSON file or builtin name")
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("overhead", help="memory overhead per method and task count")
    p.add_argument("--arch", default="alexnet-like")
    p.add_argument("--tasks", type=int, default=10)
    p.add_argument("--methods", help=f"comma list from {','.join(OVERHEAD_MODELS)}")
    p.add_argument("--out", help="CSV file (default stdout)")
    p.set_defaults(func=cmd_overhead)

    p = sub.add_parser("augment-check", help="dry-run the data pipeline")
    common(p)
    p.set_defaults(func=cmd_augment_check)

    p = sub.add_parser("eval", help="evaluate a snapshot on one task")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--config", help="run config (default: config.json of the run)")
    p.set_defaults(func=cmd_eval)
    return parser


def setup_logging():
    level = os.environ.get("TFM_LOG_LEVEL", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"TFM_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None):
    try:
        setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except TFMError as exc:
        print(f"tfm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
