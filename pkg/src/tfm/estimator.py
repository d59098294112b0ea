"""scikit-learn style front end for task-incremental learning."""
import enum
from dataclasses import asdict

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import hflip
from .errors import ConfigError, DataError
from .growth import (FIXED_SCHEDULE, GrowthPolicy, initial_widths, scheduled_rate,
                     select_rate)
from .network import ArchSpec, MaskedNetwork
from .tensor import make_rng
from .trainer import Split, Trainer, TrainerConfig


class MethodKind(str, enum.Enum):
    TFM = "tfm"
    TFM_NO_FN = "tfm_no_fn"
    BINARY_MASK = "binary_mask"
    FINETUNE = "finetune"
    FREEZE = "freeze"
    JOINT = "joint"


def stratified_holdout(y, fraction, rng):
    """Split indices into (keep, holdout) with ``fraction`` of every class held out.

    Per-class holdout sizes are rounded half-up, at least one sample when
    the class has two or more.
    """
    keep, hold = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(np.floor(fraction * len(idx) + 0.5))
        if len(idx) > 1:
            k = min(max(k, 1), len(idx) - 1)
        else:
            k = 0
        hold.append(idx[:k])
        keep.append(idx[k:])
    return np.sort(np.concatenate(keep)), np.sort(np.concatenate(hold))


def binary_partitions(caps, num_tasks):
    """Equal disjoint feature blocks per task; remainders go to earlier tasks."""
    out = []
    for t in range(num_tasks):
        out.append([c // num_tasks + (1 if t < c % num_tasks else 0) for c in caps])
    return out


class ContinualClassifier(BaseEstimator):
    """Task-incremental classifier.

    Each call to :meth:`partial_fit` learns one new task (its own label set
    and head); :meth:`predict` needs the task id. ``method`` picks ternary
    feature masks (``"tfm"``, ``"tfm_no_fn"``), disjoint binary masks
    (``"binary_mask"``, which needs ``binary_tasks``) or one of the
    baselines ``"finetune"``, ``"freeze"`` and ``"joint"``.

    Parameters
    ----------
    arch : ArchSpec or dict, optional
        Feature extractor with per-layer caps. Defaults to a 128-128 MLP.
    growth : GrowthPolicy, optional
        Growth between tasks (masked methods only).
    trainer : TrainerConfig, optional
    val_fraction : float
        Share of each task's training data held out for validation when no
        explicit validation set is passed.
    """

    def __init__(self, arch=None, method="tfm", growth=None, trainer=None, binary_tasks=None,
                 val_fraction=0.1, hflip=False, random_state=0):
        self.arch = arch
        self.method = method
        self.growth = growth
        self.trainer = trainer
        self.binary_tasks = binary_tasks
        self.val_fraction = val_fraction
        self.hflip = hflip
        self.random_state = random_state

    # -- configuration ----------------------------------------------------------------

    def _method(self):
        try:
            return MethodKind(self.method)
        except ValueError:
            raise ConfigError(f"unknown method {self.method!r}") from None

    def _arch(self, sample_shape):
        if self.arch is None:
            if len(sample_shape) != 1:
                raise ConfigError("image inputs need an explicit architecture")
            return ArchSpec.mlp(sample_shape[0], [128, 128])
        arch = self.arch if isinstance(self.arch, ArchSpec) else ArchSpec.from_dict(self.arch)
        if tuple(arch.input_shape) != tuple(sample_shape):
            raise DataError(f"samples have shape {sample_shape}, architecture expects "
                            f"{arch.input_shape}")
        return arch

    def _trainer_config(self):
        cfg = self.trainer or TrainerConfig()
        if isinstance(cfg, dict):
            cfg = TrainerConfig(**cfg)
        return TrainerConfig(**{**asdict(cfg), "seed": int(self.random_state)})

    def _policy(self):
        policy = self.growth or GrowthPolicy()
        return GrowthPolicy(**policy) if isinstance(policy, dict) else policy

    def _augment(self):
        return hflip if self.hflip else None

    def _build(self, sample_shape):
        method = self._method()
        arch = self._arch(sample_shape)
        cfg = self._trainer_config()
        seed = int(self.random_state)
        if method in (MethodKind.TFM, MethodKind.TFM_NO_FN):
            widths = initial_widths(self._policy(), arch.caps)
            return MaskedNetwork(arch.with_widths(widths), "tfm",
                                 use_fn=method is MethodKind.TFM,
                                 dropout_p=cfg.dropout_p, seed=seed)
        if method is MethodKind.BINARY_MASK:
            if not self.binary_tasks:
                raise ConfigError("binary_mask needs binary_tasks (number of tasks to partition)")
            parts = binary_partitions(arch.caps, self.binary_tasks)
            if any(w < 1 for w in parts[-1]):
                raise ConfigError("too many tasks to partition the narrowest layer")
            self._partitions = parts
            return MaskedNetwork(arch.with_widths(parts[0]), "binary", use_fn=False,
                                 dropout_p=cfg.dropout_p, seed=seed)
        return MaskedNetwork(arch.with_widths(arch.caps), "plain", use_fn=False,
                             dropout_p=cfg.dropout_p, seed=seed,
                             freeze_after_first=method is MethodKind.FREEZE)

    # -- learning --------------------------------------------------------------------

    def _validate(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        return np.ascontiguousarray(X), y

    def partial_fit(self, X, y, X_val=None, y_val=None):
        """Learn the next task from ``(X, y)``.

        Without ``X_val`` a class-balanced ``val_fraction`` of the data is
        held out for early stopping and growth selection.
        """
        X, y = self._validate(X, y)
        if not hasattr(self, "network_"):
            self.network_ = self._build(X.shape[1:])
            self.classes_ = []
            self.growth_decisions_ = []
            self.train_records_ = []
            self._history = []
        net = self.network_
        task = net.num_tasks + 1
        classes = np.unique(y)
        if len(classes) < 2:
            raise DataError(f"task {task} needs at least two classes")
        if X_val is None:
            rng = make_rng(int(self.random_state) + 7919 * task)
            keep, hold = stratified_holdout(y, self.val_fraction, rng)
            X, X_val, y, y_val = X[keep], X[hold], y[keep], y[hold]
        else:
            X_val, y_val = self._validate(X_val, y_val)
            if not np.isin(y_val, classes).all():
                raise DataError("validation labels outside the task's classes")
        train = Split(X, np.searchsorted(classes, y))
        val = Split(X_val, np.searchsorted(classes, y_val))

        method = self._method()
        cfg = self._trainer_config()
        decision = None
        if method in (MethodKind.TFM, MethodKind.TFM_NO_FN):
            policy = self._policy()
            if task == 1:
                widths = initial_widths(policy, net.arch.caps)
                decision = {"task_id": 1, "initial_widths": widths}
                growth = None
            elif policy.mode == FIXED_SCHEDULE:
                d = scheduled_rate(policy, task, net.arch.caps, net.widths)
                decision, growth = d.to_dict(), d.added
            else:
                d = select_rate(policy, net, task, len(classes), train, val, cfg,
                                self._augment())
                decision, growth = d.to_dict(), d.added
        elif method is MethodKind.BINARY_MASK:
            if task > len(self._partitions):
                raise ConfigError(f"binary masks were partitioned for {len(self._partitions)} "
                                  "tasks")
            growth = None if task == 1 else self._partitions[task - 1]
        else:
            growth = None
        net.grow(task, growth, len(classes))
        if decision is not None:
            self.growth_decisions_.append(decision)

        if method is MethodKind.JOINT:
            # retrain from scratch on everything seen so far
            self._history.append((train, val, task))
            train = _union([(s, t) for s, _, t in self._history])
            val = _union([(v, t) for _, v, t in self._history])
            net = self.network_ = self._build(X.shape[1:])
            for t, c in enumerate(self.classes_ + [classes], start=1):
                net.grow(t, None, len(c))
        record = Trainer(cfg, self._augment()).fit_task(net, task, train, val)
        self.classes_.append(classes)
        self.train_records_.append(record)
        return self

    def fit(self, X, y, tasks):
        """Learn every task in ``tasks`` (one id per sample) in ascending order."""
        for attr in ("network_", "classes_", "growth_decisions_", "train_records_"):
            if hasattr(self, attr):
                delattr(self, attr)
        X, y = self._validate(X, y)
        tasks = np.asarray(tasks)
        if len(tasks) != len(y):
            raise DataError("need one task id per sample")
        for t in np.unique(tasks):
            idx = np.flatnonzero(tasks == t)
            self.partial_fit(X[idx], y[idx])
        return self

    # -- inference -------------------------------------------------------------------

    @property
    def n_tasks_(self):
        check_is_fitted(self, "network_")
        return self.network_.num_tasks

    def decision_function(self, X, task):
        check_is_fitted(self, "network_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        return self.network_.predict(np.ascontiguousarray(X), task)

    def predict(self, X, task):
        logits = self.decision_function(X, task)
        return self.classes_[task - 1][logits.argmax(axis=1)]

    def score(self, X, y, task):
        return float(np.mean(self.predict(X, task) == np.asarray(y)))


def _union(parts):
    X = np.concatenate([s.X for s, _ in parts])
    y = np.concatenate([s.y for s, _ in parts])
    tasks = np.concatenate([np.full(len(s), t) for s, t in parts])
    return Split(X, y, tasks)
