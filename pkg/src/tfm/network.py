"""Task-aware network assembled from masked layers."""
import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (CapacityError, ConfigError, DimensionError, NonFiniteError,
                     TaskNotRegisteredError, UsageError)
from .layers import AND, OR, Flatten, MaskedConv, MaskedDense, MaxPool, TaskHead
from .masks import MaskStore, OwnershipLedger
from .tensor import conv_output_size, spawn_rngs
from .trainer import cross_entropy_batch

MODES = ("tfm", "binary", "plain")
FEATURE_KINDS = ("dense", "conv")


@dataclass
class LayerSpec:
    kind: str
    width: int = 0
    max_width: int = None
    kernel: int = None
    stride: int = None
    pad: int = 0

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS + ("pool", "flatten"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in FEATURE_KINDS:
            if self.max_width is None:
                self.max_width = self.width
            if self.width < 0 or self.max_width < self.width:
                raise ConfigError(
                    f"{self.kind} layer: max width {self.max_width} < width {self.width}")
        if self.kind == "conv":
            self.kernel = 3 if self.kernel is None else self.kernel
            self.stride = 1 if self.stride is None else self.stride
        if self.kind == "pool":
            self.kernel = 2 if self.kernel is None else self.kernel
            self.stride = self.kernel if self.stride is None else self.stride

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "channels" in d:
            d["width"] = d.pop("channels")
        if "max_channels" in d:
            d["max_width"] = d.pop("max_channels")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad layer spec {d}: {exc}") from None


@dataclass
class ArchSpec:
    """Declarative architecture: input shape and an ordered list of layers (no heads)."""

    input_shape: tuple
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l)
                       for l in self.layers]
        if not self.feature_layers:
            raise ConfigError("architecture has no dense or conv layers")
        self.shapes()  # validates geometry

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["input_shape"], d["layers"])
        except KeyError as exc:
            raise ConfigError(f"architecture is missing {exc}") from None

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read architecture {path}: {exc}") from None

    @classmethod
    def mlp(cls, input_dim, hidden, initial=None):
        initial = hidden if initial is None else initial
        return cls((input_dim,), [LayerSpec("dense", w0, w) for w0, w in zip(initial, hidden)])

    def to_dict(self):
        return {"input_shape": list(self.input_shape),
                "layers": [{k: v for k, v in asdict(l).items() if v is not None}
                           for l in self.layers]}

    @property
    def feature_layers(self):
        return [i for i, l in enumerate(self.layers) if l.kind in FEATURE_KINDS]

    @property
    def caps(self):
        return [self.layers[i].max_width for i in self.feature_layers]

    @property
    def initial_widths(self):
        return [self.layers[i].width for i in self.feature_layers]

    def with_widths(self, widths):
        """Copy with the initial widths of the feature layers replaced."""
        new = copy.deepcopy(self)
        for i, w in zip(self.feature_layers, widths):
            if w > new.layers[i].max_width:
                raise CapacityError(f"width {w} exceeds cap {new.layers[i].max_width}")
            new.layers[i].width = int(w)
        return new

    def shapes(self, widths=None):
        """Output shape (per sample) of every layer, using ``widths`` for feature layers."""
        widths = self.caps if widths is None else list(widths)
        shape = self.input_shape
        out = []
        it = iter(widths)
        for spec in self.layers:
            if spec.kind == "dense":
                if len(shape) != 1:
                    raise ConfigError("dense layer needs a flat input; add a flatten layer")
                shape = (next(it),)
            elif spec.kind == "conv":
                if len(shape) != 3:
                    raise ConfigError("conv layer needs a (C, H, W) input")
                try:
                    h = conv_output_size(shape[1], spec.kernel, spec.stride, spec.pad)
                    w = conv_output_size(shape[2], spec.kernel, spec.stride, spec.pad)
                except DimensionError as exc:
                    raise ConfigError(str(exc)) from None
                shape = (next(it), h, w)
            elif spec.kind == "pool":
                if len(shape) != 3:
                    raise ConfigError("pool layer needs a (C, H, W) input")
                try:
                    h = conv_output_size(shape[1], spec.kernel, spec.stride, 0)
                    w = conv_output_size(shape[2], spec.kernel, spec.stride, 0)
                except DimensionError as exc:
                    raise ConfigError(str(exc)) from None
                shape = (shape[0], h, w)
            else:
                shape = (int(np.prod(shape)),)
            out.append(shape)
        if len(shape) != 1:
            raise ConfigError("architecture must end with a flat feature vector")
        return out

    def spatial_factors(self):
        """Per feature layer: input positions per feature of the previous feature layer.

        Also returns the factor between the last feature layer and the head.
        """
        factors = []
        prev, last_width = self.input_shape, None
        shapes = self.shapes()
        for spec, shape in zip(self.layers, shapes):
            if spec.kind in FEATURE_KINDS:
                factors.append(1 if last_width is None else int(np.prod(prev)) // last_width
                               if spec.kind == "dense" else 1)
                last_width = shape[0]
            prev = shape
        return factors, shapes[-1][0] // last_width


def new_connections(q, p, add_in, add_out):
    """Weights added between a q-wide and a p-wide feature layer grown by (add_in, add_out)."""
    return add_out * (q + add_in) + p * add_in


class MaskedNetwork:
    """Ordered masked layers, per-task heads and the feature ownership ledger.

    ``mode`` selects how masks are used:

    * ``"tfm"``: ternary masks, visible = owned by any task so far,
      gradients where the output OR input feature is owned by the task;
    * ``"binary"``: disjoint binary masks, gradients where output AND input are owned;
    * ``"plain"``: no masking (finetuning, freezing, joint training).
    """

    def __init__(self, arch, mode="tfm", use_fn=True, dropout_p=0.5, seed=0,
                 freeze_after_first=False, dtype=np.float32):
        if mode not in MODES:
            raise ConfigError(f"unknown network mode {mode!r}")
        if mode == "plain" and use_fn:
            raise ConfigError("feature normalization needs a masked mode")
        self.arch = arch
        self.mode = mode
        self.use_fn = use_fn
        self.dropout_p = dropout_p
        self.seed = seed
        self.freeze_after_first = freeze_after_first
        self._init_rng, self._drop_rng = spawn_rngs(seed, 2)
        self.modules = []
        self.feature_modules = []
        prev = arch.input_shape
        for spec, shape in zip(arch.layers, arch.shapes(arch.initial_widths)):
            lid = len(self.feature_modules)
            if spec.kind == "dense":
                mod = MaskedDense(prev[0], spec.width, self._init_rng, lid, use_fn,
                                  dropout_p, dtype)
            elif spec.kind == "conv":
                mod = MaskedConv(prev[0], spec.width, spec.kernel, self._init_rng,
                                 spec.stride, spec.pad, lid, use_fn, 0.0, dtype)
            elif spec.kind == "pool":
                mod = MaxPool(spec.kernel, spec.stride)
            else:
                mod = Flatten()
            if spec.kind in FEATURE_KINDS:
                self.feature_modules.append(mod)
            self.modules.append(mod)
            prev = shape
        self._in_factor, self._head_factor = arch.spatial_factors()
        self.ledger = OwnershipLedger(len(self.feature_modules))
        self.masks = MaskStore()
        self.heads = {}
        self.growth_history = []
        self._mask_cache = {}

    # -- bookkeeping ----------------------------------------------------------

    @property
    def num_tasks(self):
        return self.ledger.num_tasks

    @property
    def widths(self):
        return [m.width for m in self.feature_modules]

    def widths_at(self, task):
        return [self.ledger.count_at(l, task) for l in range(len(self.feature_modules))]

    @property
    def input_features(self):
        return self.arch.input_shape[0]

    def _check_task(self, task):
        if task not in self.heads:
            raise TaskNotRegisteredError(f"task {task} is not registered")

    def param_count(self):
        """Weights and biases of the feature layers (heads excluded)."""
        return sum(m.W.size + m.b.size for m in self.feature_modules)

    def learnable(self, task):
        """Whether task ``task`` may update feature-layer weights at all."""
        return not (self.mode == "plain" and self.freeze_after_first and task > 1)

    def task_masks(self, task):
        """Per feature layer ``(n_in, n_out, m_in, m_out)`` for ``task``.

        Input-side masks are expanded over spatial positions where a dense
        layer follows a flattened convolution.
        """
        if task in self._mask_cache:
            return self._mask_cache[task]
        self._check_task(task)
        d = self.input_features
        n_prev = np.ones(d, dtype=bool)
        if self.mode == "tfm":
            m_prev = np.full(d, task == 1)
        elif self.mode == "binary":
            m_prev = np.ones(d, dtype=bool)
        else:
            m_prev = np.full(d, self.learnable(task))
        out = []
        for l in range(len(self.feature_modules)):
            if self.mode == "tfm":
                n_out = self.ledger.derive_n(l, task)
                m_out = self.ledger.derive_m(l, task)
            elif self.mode == "binary":
                n_out = m_out = self.ledger.derive_m(l, task)
            else:
                n_out = np.ones(self.ledger.count_at(l, task), dtype=bool)
                m_out = np.full(n_out.size, self.learnable(task))
            f = self._in_factor[l]
            n_in = np.repeat(n_prev, f) if f > 1 else n_prev
            m_in = np.repeat(m_prev, f) if f > 1 else m_prev
            out.append((n_in, n_out, m_in, m_out))
            n_prev, m_prev = n_out, m_out
        self._mask_cache[task] = out
        return out

    # -- growth ---------------------------------------------------------------

    def grow(self, task, growth=None, n_classes=2):
        """Register ``task``, first widening feature layers by ``growth``.

        ``growth`` is a list (one count per feature layer) or a dict
        ``{layer: count}``. Task 1 owns the initial widths; growth there is
        added on top of them.
        """
        if task != self.num_tasks + 1:
            raise UsageError(f"tasks are registered in order; expected {self.num_tasks + 1}, "
                             f"got {task}")
        L = len(self.feature_modules)
        if growth is None:
            add = [0] * L
        elif isinstance(growth, dict):
            add = [int(growth.get(l, 0)) for l in range(L)]
        else:
            add = [int(g) for g in growth]
        if len(add) != L or any(a < 0 for a in add):
            raise ConfigError(f"growth must give {L} non-negative counts, got {growth}")
        if self.mode == "plain" and any(add):
            raise ConfigError("plain networks do not grow")
        caps = self.arch.caps
        for l, (mod, a) in enumerate(zip(self.feature_modules, add)):
            if mod.width + a > caps[l]:
                raise CapacityError(
                    f"layer {l}: growing {mod.width} by {a} exceeds cap {caps[l]}")
        for l, (mod, a) in enumerate(zip(self.feature_modules, add)):
            add_in = add[l - 1] * self._in_factor[l] if l > 0 else 0
            mod.grow(add_in, a, self._init_rng)
        if task == 1:
            registered = [m.width for m in self.feature_modules]
        else:
            registered = add
        self.ledger.register_task(registered)
        if self.mode == "binary":
            self.ledger.check_disjoint()
        self.masks.materialize(self.ledger, task)
        for l, mod in enumerate(self.feature_modules):
            mod.add_task(task, self.ledger.count_at(l, task))
        last = len(self.feature_modules) - 1
        head_in = self.ledger.count_at(last, task) * self._head_factor
        self.heads[task] = TaskHead(task, head_in, n_classes, self._init_rng,
                                    self.feature_modules[0].dtype)
        self.growth_history.append(list(add))
        return task

    # -- forward / backward --------------------------------------------------------

    def forward(self, X, task, training=False):
        masks = self.task_masks(task)
        x = X
        l = 0
        for mod in self.modules:
            if mod.kind in FEATURE_KINDS:
                n_in, n_out, _, _ = masks[l]
                x = mod.forward(x, task, n_in, n_out, training, self._drop_rng)
                l += 1
            else:
                x = mod.forward(x, training)
        return x

    def predict(self, X, task, batch_size=1024):
        """Logits of ``task``'s head, evaluation mode."""
        self._check_task(task)
        X = np.asarray(X, dtype=self.feature_modules[0].dtype)
        chunks = [self.heads[task].forward(self.forward(X[i:i + batch_size], task))
                  for i in range(0, len(X), batch_size)]
        if not chunks:
            return np.zeros((0, self.heads[task].n_classes), dtype=X.dtype)
        return np.concatenate(chunks)

    def _backward_features(self, grad, task):
        masks = self.task_masks(task)
        rule = AND if self.mode == "binary" else OR
        grads = {}
        l = len(self.feature_modules)
        for mod in reversed(self.modules):
            if mod.kind in FEATURE_KINDS:
                l -= 1
                _, _, m_in, m_out = masks[l]
                grad, grads[l] = mod.backward(grad, task, m_out, m_in, rule)
            else:
                grad = mod.backward(grad)
        return grads

    def gradients(self, X, y, task, tasks=None):
        """Loss and parameter gradients for one batch (training-mode forward).

        Returns ``(loss, layer_grads, head_grads)``; layer gradients are keyed
        by feature-layer index and carry exact zeros where masked.
        """
        self._check_task(task)
        if tasks is not None and self.mode != "plain":
            if np.any(np.asarray(tasks) != task):
                raise UsageError("masked networks train one task at a time")
            tasks = None
        feats = self.forward(X, task, training=True)
        n = len(X)
        head_grads = {}
        if tasks is None:
            logits = self.heads[task].forward(feats)
            loss, g = cross_entropy_batch(logits, y)
            gfeat, head_grads[task] = self.heads[task].backward(feats, g)
        else:
            tasks = np.asarray(tasks)
            gfeat = np.zeros_like(feats)
            loss = 0.0
            for t in np.unique(tasks):
                idx = np.flatnonzero(tasks == t)
                head = self.heads[int(t)]
                logits = head.forward(feats[idx])
                l_t, g = cross_entropy_batch(logits, y[idx])
                scale = len(idx) / n
                loss += l_t * scale
                g = g * g.dtype.type(scale)
                gfeat[idx], head_grads[int(t)] = head.backward(feats[idx], g)
        layer_grads = {}
        if self.learnable(task) or self.use_fn:
            layer_grads = self._backward_features(gfeat, task)
        else:
            for mod in self.modules:
                mod.cache = None
        return float(loss), layer_grads, head_grads

    def train_step(self, X, y, task, lr, tasks=None):
        """One SGD step on a batch; returns the batch loss.

        Only the newest task may train. ``tasks`` (per-sample task ids) is
        accepted by plain networks, for joint training over several heads.
        """
        if task != self.num_tasks:
            raise UsageError(f"only the newest task ({self.num_tasks}) can be trained, got {task}")
        loss, layer_grads, head_grads = self.gradients(X, y, task, tasks)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at task {task}")
        if lr == 0:
            return loss
        for l, grads in layer_grads.items():
            self.feature_modules[l].apply(grads, lr, task)
        for t, grads in head_grads.items():
            self.heads[t].apply(grads, lr)
        return loss

    # -- state --------------------------------------------------------------------

    def get_state(self):
        layers = [[p.copy() for _, p in m.param_arrays()] for m in self.feature_modules]
        heads = {t: (h.W.copy(), h.b.copy()) for t, h in self.heads.items()}
        return layers, heads

    def set_state(self, state):
        layers, heads = state
        for mod, arrays in zip(self.feature_modules, layers):
            for (name, p), saved in zip(mod.param_arrays(), arrays):
                if p.shape != saved.shape:
                    raise UsageError("state does not match the network's shape")
                p[...] = saved
        for t, (W, b) in heads.items():
            self.heads[t].W[...] = W
            self.heads[t].b[...] = b

    def clone(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        """Cast every parameter (used for double-precision gradient checks)."""
        for mod in self.feature_modules:
            mod.astype(dtype)
        for h in self.heads.values():
            h.astype(dtype)
        return self
