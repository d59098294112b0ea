"""Plain-SGD training loop with validation-driven learning-rate decay."""
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .tensor import make_rng

log = logging.getLogger(__name__)


def cross_entropy(logits, label):
    """Softmax cross-entropy of one sample; returns ``(loss, grad_logits)``."""
    logits = np.asarray(logits)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    grad = np.exp(shifted - log_z)
    loss = float(log_z - shifted[label])
    grad[label] -= 1
    return loss, grad


def cross_entropy_batch(logits, labels):
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1
    return loss, grad / grad.dtype.type(n)


@dataclass
class TrainerConfig:
    batch_size: int = 64
    lr_init: float = 0.05
    lr_decay_factor: float = 3.0
    patience_epochs: int = 5
    lr_floor: float = 1e-4
    max_epochs: int = 200
    dropout_p: float = 0.5
    seed: int = 0
    improvement_tol: float = 1e-5

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience_epochs < 1:
            raise ConfigError("batch_size, max_epochs and patience_epochs must be >= 1")
        if self.lr_init < 0 or self.lr_decay_factor <= 1:
            raise ConfigError("need lr_init >= 0 and lr_decay_factor > 1")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")


@dataclass
class Split:
    """Samples, task-local labels and (for joint training) per-sample task ids."""

    X: np.ndarray
    y: np.ndarray
    tasks: np.ndarray = None

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return Split(self.X[idx], self.y[idx], None if self.tasks is None else self.tasks[idx])


@dataclass
class TrainRecord:
    task: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1

    @property
    def epochs(self):
        return len(self.train_loss)

    def to_json(self):
        return json.dumps(asdict(self), indent=2)


def evaluate(net, split, task):
    """Mean loss and accuracy of ``net`` on ``split``; uses per-sample heads if given."""
    if split.tasks is None:
        groups = [(task, np.arange(len(split)))]
    else:
        groups = [(int(t), np.flatnonzero(split.tasks == t)) for t in np.unique(split.tasks)]
    loss = 0.0
    correct = 0
    for t, idx in groups:
        logits = net.predict(split.X[idx], t)
        l, _ = cross_entropy_batch(logits, split.y[idx])
        loss += l * len(idx)
        correct += int(np.sum(logits.argmax(axis=1) == split.y[idx]))
    return loss / len(split), correct / len(split)


class Trainer:
    """Mini-batch SGD over one task.

    After every epoch the validation loss is checked; ``patience_epochs``
    epochs without improvement divide the learning rate by
    ``lr_decay_factor`` (and reset the counter). Training stops once the
    rate drops below ``lr_floor`` or after ``max_epochs``, and the network
    is left at its best-validation-loss parameters.
    """

    def __init__(self, config=None, augment=None):
        self.config = config or TrainerConfig()
        self.augment = augment

    def validate(self, net, val, task):
        return evaluate(net, val, task)

    def fit_task(self, net, task, train, val):
        cfg = self.config
        if len(train) == 0 or len(val) == 0:
            raise DataError(f"task {task}: empty train or validation split")
        rng = make_rng(cfg.seed + 1_000_003 * task)
        record = TrainRecord(task=task)
        decays = 0
        lr = cfg.lr_init
        best_loss = np.inf
        best_state = net.get_state()
        stale = 0
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(len(train))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = train.subset(order[start:start + cfg.batch_size])
                X = batch.X if self.augment is None else self.augment(batch.X, rng)
                total += net.train_step(X, batch.y, task, lr, batch.tasks) * len(batch)
            val_loss, val_acc = self.validate(net, val, task)
            record.train_loss.append(total / len(train))
            record.val_loss.append(float(val_loss))
            record.val_accuracy.append(float(val_acc))
            record.lr.append(lr)
            if val_loss < best_loss - cfg.improvement_tol:
                best_loss = val_loss
                best_state = net.get_state()
                record.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience_epochs:
                    decays += 1
                    lr = cfg.lr_init / cfg.lr_decay_factor ** decays
                    stale = 0
                    if lr < cfg.lr_floor:
                        record.stop_reason = "lr-floor"
                        break
        else:
            record.stop_reason = "epoch-cap"
        net.set_state(best_state)
        log.info("task %d: %d epochs, stop=%s, best val loss %.4f at epoch %d",
                 task, record.epochs, record.stop_reason, best_loss, record.best_epoch)
        return record


def fit_task(net, task, train, val, config=None, augment=None):
    return Trainer(config, augment).fit_task(net, task, train, val)
