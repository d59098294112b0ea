"""Task-incremental learning with ternary feature masks, in NumPy."""
from .errors import (CapacityError, ConfigError, DataError, FormatError, InvariantError,
                     MaskCorruptionError, TFMError)
from .estimator import ContinualClassifier, MethodKind
from .growth import GrowthPolicy
from .harness import AccuracyMatrix, avg_accuracy, build_sequence, forgetting, run_scenario
from .masks import MaskState, MaskStore, OwnershipLedger
from .network import ArchSpec, LayerSpec, MaskedNetwork
from .overhead import count_params, overhead_curve
from .snapshot import restore, snapshot
from .trainer import Trainer, TrainerConfig

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "ArchSpec", "CapacityError", "ConfigError", "ContinualClassifier",
    "DataError", "FormatError", "GrowthPolicy", "InvariantError", "LayerSpec",
    "MaskCorruptionError", "MaskState", "MaskStore", "MaskedNetwork", "MethodKind",
    "OwnershipLedger", "TFMError", "Trainer", "TrainerConfig", "avg_accuracy", "build_sequence",
    "count_params", "forgetting", "overhead_curve", "restore", "run_scenario", "snapshot",
]
