"""Binary model files.

Layout (all integers little-endian u32, all floats little-endian f32)::

    b"TFMMODEL" version
    manifest_len manifest (UTF-8 JSON: arch, mode, flags, widths per task, ...)
    per feature layer:  W, b, fn_count, fn_count x (task, gamma, beta)
    mask_count, mask_count x (layer_id, task_id, count, packed 2-bit states)
    head_count, head_count x (task, W, b)
    b"TFMEND\\0\\0"

where every array is ``ndim, dims..., data``.
"""
import io
import json
import struct

import numpy as np

from .errors import FormatError
from .masks import LayerTaskMask, OwnershipLedger
from .network import ArchSpec, MaskedNetwork

MAGIC = b"TFMMODEL"
TRAILER = b"TFMEND\0\0"
VERSION = 1
_U32 = struct.Struct("<I")


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u32(self, v):
        self.buf.write(_U32.pack(int(v)))

    def raw(self, b):
        self.buf.write(b)

    def array(self, a):
        a = np.asarray(a)
        if a.dtype != np.float32:
            raise FormatError(f"only float32 parameters can be stored, got {a.dtype}")
        self.u32(a.ndim)
        for d in a.shape:
            self.u32(d)
        self.buf.write(a.astype("<f4").tobytes())


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what="integer"):
        return _U32.unpack(self.take(4, what))[0]

    def array(self, what):
        ndim = self.u32(f"{what} header")
        if ndim > 8:
            raise FormatError(f"implausible rank {ndim} for {what}", self.pos - 4)
        shape = tuple(self.u32(f"{what} shape") for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = self.take(4 * n, what)
        return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)


def to_bytes(net):
    w = _Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    manifest = {
        "arch": net.arch.to_dict(),
        "mode": net.mode,
        "use_fn": net.use_fn,
        "dropout_p": net.dropout_p,
        "seed": net.seed,
        "freeze_after_first": net.freeze_after_first,
        "num_tasks": net.num_tasks,
        "widths_at": [net.widths_at(t) for t in range(1, net.num_tasks + 1)],
        "widths": net.widths,
        "head_classes": [net.heads[t].n_classes for t in range(1, net.num_tasks + 1)],
        "growth_history": net.growth_history,
        "rng": [net._init_rng.bit_generator.state, net._drop_rng.bit_generator.state],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    w.u32(len(blob))
    w.raw(blob)
    for mod in net.feature_modules:
        w.array(mod.W)
        w.array(mod.b)
        w.u32(len(mod.fn))
        for t in sorted(mod.fn):
            w.u32(t)
            w.array(mod.fn[t][0])
            w.array(mod.fn[t][1])
    w.u32(len(net.masks))
    for mk in net.masks:
        w.raw(mk.to_bytes())
    w.u32(len(net.heads))
    for t in sorted(net.heads):
        w.u32(t)
        w.array(net.heads[t].W)
        w.array(net.heads[t].b)
    w.raw(TRAILER)
    return w.buf.getvalue()


def from_bytes(data):
    r = _Reader(data)
    if bytes(r.take(8, "magic")) != MAGIC:
        raise FormatError("not a model file (bad magic)", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}", 8)
    mlen = r.u32("manifest length")
    try:
        manifest = json.loads(bytes(r.take(mlen, "manifest")).decode())
        arch = ArchSpec.from_dict(manifest["arch"])
        num_tasks = int(manifest["num_tasks"])
        widths_at = manifest["widths_at"]
        head_classes = manifest["head_classes"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad manifest: {exc}", 16) from None
    layers = []
    for l in range(len(arch.feature_layers)):
        W = r.array(f"layer {l} weights")
        b = r.array(f"layer {l} biases")
        fn = {}
        for _ in range(r.u32("normalization count")):
            t = r.u32("normalization task")
            fn[t] = (r.array(f"layer {l} gamma"), r.array(f"layer {l} beta"))
        layers.append((W, b, fn))
    masks = []
    for _ in range(r.u32("mask count")):
        mk, r.pos = LayerTaskMask.read(r.data, r.pos)
        masks.append(mk)
    heads = {}
    for _ in range(r.u32("head count")):
        t = r.u32("head task")
        heads[t] = (r.array(f"head {t} weights"), r.array(f"head {t} biases"))
    if bytes(r.take(len(TRAILER), "trailer")) != TRAILER:
        raise FormatError("bad trailer", r.pos - len(TRAILER))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after model", r.pos)

    ledger = OwnershipLedger.from_masks(len(arch.feature_layers), masks)
    if ledger.num_tasks != num_tasks or \
            [[ledger.count_at(l, t) for l in range(ledger.num_layers)]
             for t in range(1, num_tasks + 1)] != widths_at:
        raise FormatError("masks disagree with the manifest widths")

    first = widths_at[0] if num_tasks else arch.initial_widths
    net = MaskedNetwork(arch.with_widths(first), manifest["mode"], manifest["use_fn"],
                        manifest["dropout_p"], manifest["seed"],
                        manifest["freeze_after_first"])
    prev = first
    for t in range(1, num_tasks + 1):
        cur = widths_at[t - 1]
        growth = None if t == 1 else [c - p for c, p in zip(cur, prev)]
        net.grow(t, growth, head_classes[t - 1])
        prev = cur
    if net.widths != manifest["widths"]:
        raise FormatError("layer widths disagree with the manifest")
    for mod, (W, b, fn) in zip(net.feature_modules, layers):
        if W.shape != mod.W.shape or b.shape != mod.b.shape or set(fn) != set(mod.fn):
            raise FormatError(f"layer {mod.layer_id} parameters do not match the manifest")
        mod.W, mod.b = W, b
        for t, (g, be) in fn.items():
            if g.shape != mod.fn[t][0].shape or be.shape != mod.fn[t][1].shape:
                raise FormatError(f"layer {mod.layer_id} task {t} normalization shape mismatch")
        mod.fn = fn
    if set(heads) != set(net.heads):
        raise FormatError("heads do not match the manifest")
    for t, (W, b) in heads.items():
        if W.shape != net.heads[t].W.shape or b.shape != net.heads[t].b.shape:
            raise FormatError(f"head {t} shape mismatch")
        net.heads[t].W, net.heads[t].b = W, b
    for mk in masks:
        if net.masks.get(mk.layer_id, mk.task_id) != mk:
            raise FormatError(f"mask for layer {mk.layer_id}, task {mk.task_id} mismatch")
    net.growth_history = manifest.get("growth_history", net.growth_history)
    rng_state = manifest.get("rng")
    if rng_state:
        net._init_rng.bit_generator.state = rng_state[0]
        net._drop_rng.bit_generator.state = rng_state[1]
    return net


def snapshot(net, path):
    data = to_bytes(net)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def restore(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
