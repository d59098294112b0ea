"""How much each layer grows before a new task."""
import logging
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .errors import CapacityError, ConfigError
from .trainer import Trainer, TrainerConfig, evaluate

log = logging.getLogger(__name__)

VALIDATION_SEARCH = "search"
FIXED_SCHEDULE = "fixed"

# accuracy margins (absolute fractions) used for validation search
MARGIN_TINY_IMAGENET = 0.015
MARGIN_FINE_GRAINED = 0.001


def scaled(fraction, cap):
    """``fraction`` of ``cap`` features, rounded half-up and never negative."""
    return max(0, int((Decimal(repr(float(fraction))) * cap).quantize(
        Decimal(1), rounding=ROUND_HALF_UP)))


@dataclass
class GrowthPolicy:
    mode: str = FIXED_SCHEDULE
    candidate_rates: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2])
    margin: float = MARGIN_TINY_IMAGENET
    schedule: list = field(default_factory=lambda: [0.55] + [0.05] * 9)
    first_task_fraction: float = 0.5
    search_max_epochs: int = None

    def __post_init__(self):
        if self.mode not in (VALIDATION_SEARCH, FIXED_SCHEDULE):
            raise ConfigError(f"unknown growth mode {self.mode!r}")
        rates = list(self.candidate_rates)
        if self.mode == VALIDATION_SEARCH and not rates:
            raise ConfigError("validation search needs candidate rates")
        if rates != sorted(rates) or any(not 0 <= r <= 1 for r in rates):
            raise ConfigError("candidate rates must be sorted and within [0, 1]")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if any(f < 0 for f in self.schedule) or sum(Decimal(repr(f)) for f in self.schedule) > 1:
            raise CapacityError("growth schedule adds up to more than the full network")
        if not 0 < self.first_task_fraction <= 1:
            raise ConfigError("first_task_fraction must be in (0, 1]")

    @classmethod
    def fixed(cls, first, increment, num_tasks):
        return cls(FIXED_SCHEDULE, schedule=[first] + [increment] * (num_tasks - 1))

    def to_dict(self):
        return asdict(self)


@dataclass
class GrowthDecision:
    task_id: int
    chosen_rate: float
    added: list
    candidate_accuracies: dict = field(default_factory=dict)
    effective_rate: float = None

    def to_dict(self):
        d = asdict(self)
        d["candidate_accuracies"] = {repr(k): v for k, v in self.candidate_accuracies.items()}
        return d


def counts_for(rate, caps):
    return [scaled(rate, c) for c in caps]


def initial_widths(policy, caps):
    """Widths that task 1 starts from."""
    frac = policy.schedule[0] if policy.mode == FIXED_SCHEDULE else policy.first_task_fraction
    widths = counts_for(frac, caps)
    if any(w < 1 for w in widths):
        raise CapacityError(f"first-task fraction {frac} leaves an empty layer")
    return widths


def _decision(task, rate, added, accs=None):
    return GrowthDecision(task, rate, added, accs or {},
                          effective_rate=rate if any(added) else 0.0)


def scheduled_rate(policy, task, caps, widths=None):
    """Per-layer feature counts for ``task`` under a fixed schedule.

    Task 1 gets its scheduled fraction as initial width; later tasks add
    their fraction of each layer's cap. With the current ``widths`` given,
    rounding overshoot past a cap is clipped to the remaining room.
    """
    if policy.mode != FIXED_SCHEDULE:
        raise ConfigError("scheduled_rate needs a fixed-schedule policy")
    if not 1 <= task <= len(policy.schedule):
        raise CapacityError(f"growth schedule has no entry for task {task}")
    rate = policy.schedule[task - 1]
    if task == 1:
        return _decision(task, rate, initial_widths(policy, caps))
    added = counts_for(rate, caps)
    if widths is not None:
        added = [min(a, c - w) for a, c, w in zip(added, caps, widths)]
    return _decision(task, rate, added)


def _room(net):
    return [c - w for c, w in zip(net.arch.caps, net.widths)]


def select_rate(policy, net, task, n_classes, train, val, trainer_config=None, augment=None):
    """Pick the lowest candidate rate whose validation accuracy is within
    ``margin`` of the best candidate.

    Each candidate is tried on a clone of ``net``; ``net`` itself is not
    touched. Only the current task's splits are seen.
    """
    if policy.mode != VALIDATION_SEARCH:
        raise ConfigError("select_rate needs a validation-search policy")
    config = trainer_config or TrainerConfig()
    if policy.search_max_epochs is not None:
        config = TrainerConfig(**{**asdict(config), "max_epochs": policy.search_max_epochs})
    caps = net.arch.caps
    room = _room(net)
    accs = {}
    counts = {}
    for rate in policy.candidate_rates:
        added = counts_for(rate, caps)
        if any(a > r for a, r in zip(added, room)):
            log.info("task %d: rate %s exceeds remaining capacity", task, rate)
            continue
        trial = net.clone()
        trial.grow(task, added, n_classes)
        Trainer(config, augment).fit_task(trial, task, train, val)
        _, accs[rate] = evaluate(trial, val, task)
        counts[rate] = added
        log.info("task %d: rate %s -> val acc %.4f", task, rate, accs[rate])
    if not accs:
        raise CapacityError(f"task {task}: every candidate growth rate exceeds capacity")
    chosen = pick_rate(accs, policy.margin)
    return _decision(task, chosen, counts[chosen], accs)


def pick_rate(accuracies, margin):
    """Lowest rate whose accuracy is within ``margin`` (absolute) of the best one."""
    best = max(accuracies.values())
    # exactly-at-margin candidates count as within it despite float rounding
    return min(r for r, a in accuracies.items() if a >= best - margin - 1e-12)
