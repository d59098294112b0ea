"""Continual-learning scenarios: task sequences, runs, and metrics."""
import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvariantError
from .estimator import ContinualClassifier, MethodKind, stratified_holdout
from .growth import scaled
from .overhead import overhead_table
from .snapshot import snapshot
from .tensor import make_rng

log = logging.getLogger(__name__)

RANDOM = "random"
GROUPED = "grouped"
SIZED_FIRST = "sized_first"
SPLIT_MODES = (RANDOM, GROUPED, SIZED_FIRST)


@dataclass
class TaskSpec:
    classes: list
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class TaskSequence:
    tasks: list
    dataset: str
    mode: str

    def __len__(self):
        return len(self.tasks)


def _even_split(items, parts):
    if parts < 1 or parts > len(items):
        raise ConfigError(f"cannot split {len(items)} classes into {parts} tasks")
    return [list(map(int, chunk)) for chunk in np.array_split(np.asarray(items), parts)]


def load_grouping(path, n_classes):
    """Class groups from a JSON file: ``[[c, ...], ...]`` or ``{"groups": [...]}``."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grouping file {path}: {exc}") from None
    groups = data["groups"] if isinstance(data, dict) else data
    seen = set()
    for g in groups:
        for c in g:
            if not isinstance(c, int) or not 0 <= c < n_classes:
                raise ConfigError(f"grouping file {path}: class {c!r} not in dataset")
            if c in seen:
                raise ConfigError(f"grouping file {path}: class {c} appears twice")
            seen.add(c)
    if not groups or any(len(g) == 0 for g in groups):
        raise ConfigError(f"grouping file {path}: empty group")
    return [sorted(g) for g in groups]


def build_sequence(dataset, mode=RANDOM, num_tasks=5, seed=0, grouping_file=None,
                   first_fraction=0.55, test_fraction=0.2, val_fraction=0.1):
    """Split a dataset's classes into disjoint tasks with train/val/test indices.

    Without a designated test set, ``test_fraction`` of every class is held
    out for testing; ``val_fraction`` of each class's remaining training
    samples forms the validation split.
    """
    rng = make_rng(seed)
    C = dataset.n_classes
    if mode == RANDOM:
        groups = _even_split(rng.permutation(C), num_tasks)
    elif mode == GROUPED:
        if not grouping_file:
            raise ConfigError("grouped sequences need a grouping file")
        groups = load_grouping(grouping_file, C)
        if num_tasks and num_tasks != len(groups):
            raise ConfigError(f"grouping file has {len(groups)} groups, {num_tasks} tasks requested")
    elif mode == SIZED_FIRST:
        order = rng.permutation(C)
        first = scaled(first_fraction, C)
        if num_tasks < 2 or not 0 < first < C:
            raise ConfigError("sized_first needs >= 2 tasks and a first fraction inside (0, 1)")
        groups = [sorted(map(int, order[:first]))] + _even_split(order[first:], num_tasks - 1)
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    tasks = []
    for classes in groups:
        classes = sorted(classes)
        idx = np.flatnonzero(np.isin(dataset.y, classes))
        if dataset.is_test is not None:
            test = idx[dataset.is_test[idx]]
            pool = idx[~dataset.is_test[idx]]
        else:
            keep, hold = stratified_holdout(dataset.y[idx], test_fraction, rng)
            pool, test = idx[keep], idx[hold]
        keep, hold = stratified_holdout(dataset.y[pool], val_fraction, rng)
        tasks.append(TaskSpec(classes, pool[keep], pool[hold], test))
    return TaskSequence(tasks, dataset.name, mode)


class AccuracyMatrix:
    """``A[k][s]``: accuracy on task ``s`` after training task ``k`` (1-based, s <= k)."""

    def __init__(self, num_tasks):
        self.num_tasks = num_tasks
        self.rows = []

    def add_row(self, row):
        k = len(self.rows) + 1
        if len(row) != k:
            raise InvariantError(f"checkpoint {k} needs {k} accuracies, got {len(row)}")
        if any(not 0 <= a <= 1 for a in row):
            raise InvariantError("accuracies must lie in [0, 1]")
        self.rows.append([float(a) for a in row])

    def __getitem__(self, ks):
        k, s = ks
        if not 1 <= s <= k <= len(self.rows):
            raise IndexError(f"A[{k}][{s}] is not defined")
        return self.rows[k - 1][s - 1]

    @property
    def complete(self):
        return len(self.rows) == self.num_tasks

    def to_csv(self):
        header = ["checkpoint"] + [f"task_{s}" for s in range(1, self.num_tasks + 1)]
        lines = [",".join(header)]
        for k, row in enumerate(self.rows, start=1):
            cells = [repr(a) for a in row] + [""] * (self.num_tasks - len(row))
            lines.append(",".join([str(k)] + cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(text.strip().splitlines()))
        mat = cls(len(rows[0]) - 1)
        for r in rows[1:]:
            mat.add_row([float(v) for v in r[1:] if v != ""])
        return mat


def _require_complete(matrix):
    if not matrix.complete or not matrix.rows:
        raise InvariantError(
            f"accuracy matrix has {len(matrix.rows)} of {matrix.num_tasks} checkpoints")


def forgetting(matrix):
    """Per-task ``A[s][s] - A[K][s]`` and their mean over ``s < K``."""
    _require_complete(matrix)
    K = matrix.num_tasks
    per_task = [matrix[s, s] - matrix[K, s] for s in range(1, K + 1)]
    mean = float(np.mean(per_task[:-1])) if K > 1 else 0.0
    return per_task, mean


def avg_accuracy(matrix, skip_first=False):
    """Mean final-checkpoint accuracy (optionally over tasks 2..K only)."""
    _require_complete(matrix)
    final = matrix.rows[-1]
    vals = final[1:] if skip_first else final
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class ScenarioResult:
    method: str
    matrix: AccuracyMatrix
    records: list
    decisions: list
    probe_logits: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    estimator: ContinualClassifier = None

    def forgetting(self):
        return forgetting(self.matrix)

    def avg_accuracy(self):
        return avg_accuracy(self.matrix)


def task_split(dataset, sequence, task, part):
    spec = sequence.tasks[task - 1]
    idx = getattr(spec, part)
    return dataset.X[idx], dataset.y[idx]


def run_scenario(method, sequence, dataset, arch=None, policy=None, trainer_config=None,
                 seed=0, probe=None, snapshot_dir=None, hflip=False):
    """Train ``method`` over every task in order, evaluating all seen tasks after each.

    ``probe`` (an array of samples) records the logits of every seen task
    at every checkpoint, keyed ``(checkpoint, task)``.
    """
    method = MethodKind(method)
    est = ContinualClassifier(arch=arch, method=method.value, growth=policy,
                              trainer=trainer_config, binary_tasks=len(sequence),
                              hflip=hflip, random_state=seed)
    matrix = AccuracyMatrix(len(sequence))
    result = ScenarioResult(method.value, matrix, [], [], estimator=est)
    for k in range(1, len(sequence) + 1):
        Xtr, ytr = task_split(dataset, sequence, k, "train")
        Xva, yva = task_split(dataset, sequence, k, "val")
        est.partial_fit(Xtr, ytr, Xva, yva)
        row = []
        for s in range(1, k + 1):
            Xte, yte = task_split(dataset, sequence, s, "test")
            row.append(est.score(Xte, yte, s))
            if probe is not None:
                result.probe_logits[(k, s)] = est.decision_function(probe, s)
        matrix.add_row(row)
        log.info("%s checkpoint %d: %s", method.value, k, " ".join(f"{a:.3f}" for a in row))
        if snapshot_dir:
            os.makedirs(snapshot_dir, exist_ok=True)
            path = os.path.join(snapshot_dir, f"ckpt{k}.tfm")
            snapshot(est.network_, path)
            result.snapshots.append(path)
    result.records = est.train_records_
    result.decisions = est.growth_decisions_
    return result


def write_run(out_dir, result, config, arch):
    """Write matrix, forgetting, summary, growth, overhead and train records into ``out_dir``."""
    os.makedirs(os.path.join(out_dir, "train_records"), exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "matrix.csv"), "w") as fh:
        fh.write(result.matrix.to_csv())
    per_task, mean = result.forgetting()
    with open(os.path.join(out_dir, "forgetting.csv"), "w") as fh:
        fh.write("task,forgetting\n")
        for s, f in enumerate(per_task, start=1):
            fh.write(f"{s},{f!r}\n")
        fh.write(f"mean,{mean!r}\n")
    summary = {"method": result.method, "avg_accuracy": result.avg_accuracy(),
               "mean_forgetting": mean}
    if config.get("sequence", {}).get("mode") == SIZED_FIRST:
        summary["avg_accuracy_tasks_2_to_k"] = avg_accuracy(result.matrix, skip_first=True)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "growth.json"), "w") as fh:
        json.dump(result.decisions, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "overhead.csv"), "w") as fh:
        fh.write(overhead_csv(arch, result.matrix.num_tasks))
    for rec in result.records:
        with open(os.path.join(out_dir, "train_records", f"task_{rec.task}.json"), "w") as fh:
            fh.write(rec.to_json() + "\n")


def overhead_csv(arch, num_tasks, methods=None):
    lines = ["method,tasks,bytes"]
    lines += [f"{m},{t},{b}" for m, t, b in overhead_table(arch, num_tasks, methods)]
    return "\n".join(lines) + "\n"
