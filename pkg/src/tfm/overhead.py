"""Parameter counting and closed-form memory overhead of continual learners."""
import math
from dataclasses import dataclass

from .network import ArchSpec

FLOAT_BYTES = 4


def count_params(arch, widths=None):
    """``(weights, features)`` of a feature extractor; biases count as weights, heads excluded."""
    if not isinstance(arch, ArchSpec):
        arch = ArchSpec.from_dict(arch)
    widths = arch.caps if widths is None else list(widths)
    shapes = arch.shapes(widths)
    weights = features = 0
    prev = arch.input_shape
    for spec, shape in zip(arch.layers, shapes):
        if spec.kind == "dense":
            weights += shape[0] * prev[0] + shape[0]
            features += shape[0]
        elif spec.kind == "conv":
            weights += shape[0] * prev[0] * spec.kernel ** 2 + shape[0]
            features += shape[0]
        prev = shape
    return weights, features


@dataclass(frozen=True)
class OverheadModel:
    """Extra storage of one method family.

    Per-task storage is ``bits_per_feature`` + ``floats_per_feature`` for
    every feature, ``bits_per_weight`` + ``floats_per_weight`` for every
    weight, plus a full network copy if ``network_copy``. With ``once``
    the amount is paid after the first task only.
    """

    method: str
    bits_per_feature: float = 0
    floats_per_feature: float = 0
    bits_per_weight: float = 0
    floats_per_weight: float = 0
    network_copy: bool = False
    once: bool = False

    def per_task_bytes(self, weights, features):
        bits = self.bits_per_feature * features + self.bits_per_weight * weights
        floats = self.floats_per_feature * features + self.floats_per_weight * weights
        if self.network_copy:
            floats += weights
        return math.ceil(bits / 8) + FLOAT_BYTES * int(floats)

    def total_bytes(self, weights, features, num_tasks):
        if num_tasks <= 0:
            return 0
        per = self.per_task_bytes(weights, features)
        return per if self.once else per * num_tasks


OVERHEAD_MODELS = {
    "tfm": OverheadModel("tfm", bits_per_feature=2),
    "tfm_fn": OverheadModel("tfm_fn", bits_per_feature=2, floats_per_feature=2),
    "hat": OverheadModel("hat", floats_per_feature=1),
    "packnet": OverheadModel("packnet", bits_per_weight=1),
    "ewc": OverheadModel("ewc", floats_per_weight=1, once=True),
    "pnn": OverheadModel("pnn", network_copy=True),
}


def overhead_curve(model, arch, num_tasks):
    """Total overhead in bytes after 0, 1, ..., ``num_tasks`` tasks."""
    if isinstance(model, str):
        model = OVERHEAD_MODELS[model]
    weights, features = count_params(arch)
    return [model.total_bytes(weights, features, t) for t in range(num_tasks + 1)]


def overhead_table(arch, num_tasks, methods=None):
    """Rows ``(method, tasks, bytes)`` for every method and task count."""
    rows = []
    for name in methods or OVERHEAD_MODELS:
        for t, b in enumerate(overhead_curve(name, arch, num_tasks)):
            rows.append((name, t, b))
    return rows
