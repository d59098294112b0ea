"""Ternary feature masks.

Every feature of every layer is owned by exactly one task: the task that
was newest when the feature was appended. The per-task masks are derived
from that ownership record rather than stored during training:

* ``m`` (learnable) marks the features owned by the task;
* ``n`` (visible) marks the features owned by the task or any earlier one.

The pair collapses into one 2-bit state per feature (see :class:`MaskState`).
"""
import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (FormatError, InvalidMaskError, MaskCorruptionError,
                     TaskNotRegisteredError)


class MaskState(enum.IntEnum):
    MASKED = 0
    FORWARD_ONLY = 1
    NORMAL = 2


def packed_size(count):
    return (2 * count + 7) // 8


def pack(states):
    """Pack mask states at 2 bits each, feature ``f`` in bits ``2f%8`` of byte ``f//4``."""
    s = np.asarray(states, dtype=np.uint8)
    if s.ndim != 1:
        raise InvalidMaskError("states must be one-dimensional")
    if s.size and s.max() > MaskState.NORMAL:
        raise InvalidMaskError("state value 3 is not a valid mask state")
    padded = np.zeros(4 * packed_size(s.size), dtype=np.uint8)
    padded[:s.size] = s
    quads = padded.reshape(-1, 4)
    out = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return out.astype(np.uint8).tobytes()


def unpack(data, count):
    """Inverse of :func:`pack`. Raises on a decoded value of 3."""
    raw = np.frombuffer(bytes(data), dtype=np.uint8)
    if raw.size != packed_size(count):
        raise FormatError(
            f"packed mask of {count} features needs {packed_size(count)} bytes, "
            f"got {raw.size}")
    pairs = np.stack([(raw >> shift) & 0b11 for shift in (0, 2, 4, 6)], axis=1)
    states = pairs.reshape(-1)[:count]
    bad = np.flatnonzero(states == 3)
    if bad.size:
        raise MaskCorruptionError(f"invalid mask state 3 for feature {bad[0]}",
                                  offset=int(bad[0]) // 4)
    return states.astype(np.uint8)


def to_ternary(m, n):
    """Combine learnable/visible bit vectors into mask states."""
    m = np.asarray(m, dtype=bool)
    n = np.asarray(n, dtype=bool)
    if m.shape != n.shape:
        raise InvalidMaskError(f"mask lengths differ: {m.shape} vs {n.shape}")
    if np.any(m & ~n):
        bad = int(np.flatnonzero(m & ~n)[0])
        raise InvalidMaskError(f"feature {bad} is learnable but not visible")
    return (m.astype(np.uint8) + n.astype(np.uint8)).astype(np.uint8)


def from_ternary(states):
    """Split mask states back into ``(m, n)``."""
    s = np.asarray(states)
    return s == MaskState.NORMAL, s != MaskState.MASKED


@dataclass(frozen=True)
class LayerTaskMask:
    layer_id: int
    task_id: int
    count: int
    packed: bytes

    @classmethod
    def from_states(cls, layer_id, task_id, states):
        return cls(layer_id, task_id, len(states), pack(states))

    @property
    def states(self):
        return unpack(self.packed, self.count)

    _HEADER = struct.Struct("<III")

    def to_bytes(self):
        return self._HEADER.pack(self.layer_id, self.task_id, self.count) + self.packed

    @classmethod
    def read(cls, buf, offset=0):
        """Parse one mask record from ``buf`` at ``offset``; returns (mask, new offset)."""
        end = offset + cls._HEADER.size
        if end > len(buf):
            raise FormatError("truncated mask header", offset)
        layer_id, task_id, count = cls._HEADER.unpack_from(buf, offset)
        size = packed_size(count)
        if end + size > len(buf):
            raise FormatError("truncated mask payload", end)
        packed = bytes(buf[end:end + size])
        try:
            unpack(packed, count)
        except MaskCorruptionError as exc:
            raise MaskCorruptionError(str(exc), end + (exc.offset or 0)) from None
        return cls(layer_id, task_id, count, packed), end + size


class OwnershipLedger:
    """Which task owns each feature of each growable layer.

    Tasks are registered in order starting at 1. Registering a task appends
    ``added[l]`` features to layer ``l``, all owned by the new task.
    """

    def __init__(self, num_layers):
        self.num_layers = num_layers
        self._owner = [np.zeros(0, dtype=np.int32) for _ in range(num_layers)]
        self._count_at = [[0] for _ in range(num_layers)]  # index 0 = before task 1

    @property
    def num_tasks(self):
        return len(self._count_at[0]) - 1 if self.num_layers else 0

    def register_task(self, added):
        added = [int(a) for a in added]
        if len(added) != self.num_layers:
            raise InvalidMaskError(
                f"expected {self.num_layers} growth entries, got {len(added)}")
        if any(a < 0 for a in added):
            raise InvalidMaskError("cannot remove features")
        task = self.num_tasks + 1
        for layer, a in enumerate(added):
            self._owner[layer] = np.concatenate(
                [self._owner[layer], np.full(a, task, dtype=np.int32)])
            self._count_at[layer].append(self._owner[layer].size)
        return task

    def _check(self, layer, task):
        if not 0 <= layer < self.num_layers:
            raise TaskNotRegisteredError(f"unknown layer {layer}")
        if not 1 <= task <= self.num_tasks:
            raise TaskNotRegisteredError(f"task {task} is not registered")

    def width(self, layer):
        return self._owner[layer].size

    def count_at(self, layer, task):
        """Layer width when ``task`` was registered (0 for task 0)."""
        if task == 0:
            return 0
        self._check(layer, task)
        return self._count_at[layer][task]

    def owners(self, layer):
        return self._owner[layer].copy()

    def derive_m(self, layer, task):
        self._check(layer, task)
        return self._owner[layer][:self._count_at[layer][task]] == task

    def derive_n(self, layer, task):
        self._check(layer, task)
        return self._owner[layer][:self._count_at[layer][task]] <= task

    def states(self, layer, task):
        return to_ternary(self.derive_m(layer, task), self.derive_n(layer, task))

    def check_disjoint(self):
        """Every feature has exactly one owner among the registered tasks."""
        for layer in range(self.num_layers):
            owners = self._owner[layer]
            if owners.size and (owners.min() < 1 or owners.max() > self.num_tasks):
                raise InvalidMaskError(f"layer {layer} has features without an owner")
            total = sum(int(self.derive_m(layer, t).sum())
                        for t in range(1, self.num_tasks + 1))
            if total != owners.size:
                raise InvalidMaskError(f"overlapping task masks in layer {layer}")

    @classmethod
    def from_masks(cls, num_layers, masks):
        """Rebuild a ledger from materialized masks (one per layer and task)."""
        by_key = {(mk.layer_id, mk.task_id): mk for mk in masks}
        num_tasks = max((mk.task_id for mk in masks), default=0)
        ledger = cls(num_layers)
        for task in range(1, num_tasks + 1):
            added = []
            for layer in range(num_layers):
                mk = by_key.get((layer, task))
                if mk is None:
                    raise FormatError(f"missing mask for layer {layer}, task {task}")
                m, n = from_ternary(mk.states)
                prev = ledger.width(layer)
                if n.size < prev or not n[:prev].all() or n[prev:].sum() != m[prev:].sum() \
                        or m[:prev].any() or not m[prev:].all():
                    raise FormatError(
                        f"mask for layer {layer}, task {task} is inconsistent with "
                        "sequential growth")
                added.append(n.size - prev)
            ledger.register_task(added)
        return ledger


def visibility_delta_mask(n_in_t, n_out_t, n_in_prev, n_out_prev):
    """Weight-gradient mask from the visible masks at tasks t and t-1.

    Previous-task masks are zero-padded to the current widths.
    """
    def pad(v, size):
        out = np.zeros(size, dtype=np.int8)
        out[:len(v)] = v
        return out

    q, p = len(n_in_t), len(n_out_t)
    cur = np.outer(pad(n_out_t, p), pad(n_in_t, q))
    prev = np.outer(pad(n_out_prev, p), pad(n_in_prev, q))
    return (cur - prev).astype(np.int8)


def ownership_mask(m_in, m_out):
    """Weight-gradient mask for non-revisiting training: owned row OR owned column."""
    return (np.asarray(m_out, bool)[:, None] | np.asarray(m_in, bool)[None, :]).astype(np.int8)


def binary_mask(m_in, m_out):
    """Weight-gradient mask for disjoint binary masks: owned row AND owned column."""
    return (np.asarray(m_out, bool)[:, None] & np.asarray(m_in, bool)[None, :]).astype(np.int8)


class MaskStore:
    """Packed masks, materialized once per (layer, task) at task registration."""

    def __init__(self):
        self._masks = {}

    def materialize(self, ledger, task):
        for layer in range(ledger.num_layers):
            key = (layer, task)
            if key in self._masks:
                raise InvalidMaskError(f"mask for layer {layer}, task {task} already stored")
            self._masks[key] = LayerTaskMask.from_states(layer, task, ledger.states(layer, task))

    def add(self, mask):
        self._masks[(mask.layer_id, mask.task_id)] = mask

    def get(self, layer, task):
        try:
            return self._masks[(layer, task)]
        except KeyError:
            raise TaskNotRegisteredError(f"no mask for layer {layer}, task {task}") from None

    def __iter__(self):
        return (self._masks[k] for k in sorted(self._masks, key=lambda k: (k[1], k[0])))

    def __len__(self):
        return len(self._masks)

    def nbytes(self):
        return sum(len(mk.packed) for mk in self._masks.values())
