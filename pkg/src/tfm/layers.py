"""Feature-masked dense and convolutional layers.

Per layer and task the forward pass is::

    z  = W x + b
    z' = gamma_t * z + beta_t        # task-specific feature normalization
    y  = dropout(relu(z' * n_out))

and only the features visible to the task (``n_out``) are computed at all:
rows and columns outside the masks are gathered away and their outputs are
exact zeros. The backward pass returns full-shape gradients whose masked
entries are exactly ``0.0``.
"""
import numpy as np

from .errors import DimensionError, TaskNotRegisteredError, UsageError
from .tensor import conv2d, conv2d_backward, init_uniform, maxpool2d, maxpool2d_backward

OR = "or"
AND = "and"


def _weight_mask(m_out, m_in, rule):
    if rule == OR:
        return m_out[:, None] | m_in[None, :]
    if rule == AND:
        return m_out[:, None] & m_in[None, :]
    raise ValueError(f"unknown mask rule {rule!r}")


def _active(mask):
    mask = np.asarray(mask, dtype=bool)
    return mask, np.flatnonzero(mask)


class _MaskedLayer:
    """Shared masking, normalization and dropout logic.

    Subclasses provide the linear map over gathered rows (output features)
    and columns (input features).
    """

    kind = None

    def __init__(self, layer_id, use_fn=True, dropout_p=0.0):
        self.layer_id = layer_id
        self.use_fn = use_fn
        self.dropout_p = dropout_p
        self.fn = {}
        self.cache = None

    @property
    def width(self):
        return self.W.shape[0]

    @property
    def in_width(self):
        return self.W.shape[1]

    @property
    def dtype(self):
        return self.W.dtype

    def add_task(self, task, width):
        """Create identity normalization parameters for ``task`` over ``width`` features."""
        if self.use_fn:
            self.fn[task] = (np.ones(width, dtype=self.dtype), np.zeros(width, dtype=self.dtype))

    def _fn_params(self, task):
        try:
            return self.fn[task]
        except KeyError:
            raise TaskNotRegisteredError(
                f"layer {self.layer_id} has no normalization parameters for task {task}"
            ) from None

    def _bcast(self, v):
        return v

    def _reduce(self, g):
        return g.sum(axis=0)

    # -- forward / backward -------------------------------------------------

    def forward(self, x, task, n_in, n_out, training=False, rng=None):
        n_in, cols = _active(n_in)
        n_out, rows = _active(n_out)
        if x.shape[1] != n_in.size:
            raise DimensionError(
                f"layer {self.layer_id}: input has {x.shape[1]} features, mask has {n_in.size}")
        if n_out.size > self.width or n_in.size > self.in_width:
            raise DimensionError(f"layer {self.layer_id}: mask wider than layer")
        if self.use_fn:
            gamma, beta = self._fn_params(task)
            if gamma.size != n_out.size:
                raise DimensionError(
                    f"layer {self.layer_id}: task {task} normalizes {gamma.size} features, "
                    f"mask has {n_out.size}")
        full_in = cols.size == x.shape[1]
        x_sub = x if full_in else x[:, cols]
        W_sub = self.W[np.ix_(rows, cols)]
        z = self._linear(x_sub, W_sub, self.b[rows])
        if self.use_fn:
            zh = self._bcast(gamma[rows]) * z + self._bcast(beta[rows])
        else:
            zh = z
        a = np.maximum(zh, 0)
        drop = None
        if training and self.dropout_p > 0:
            if rng is None:
                raise UsageError("dropout in training mode needs an rng")
            keep = rng.random(a.shape) >= self.dropout_p
            drop = keep.astype(a.dtype) / a.dtype.type(1.0 - self.dropout_p)
            a = a * drop
        if rows.size == n_out.size:
            y = a
        else:
            y = np.zeros((x.shape[0], n_out.size) + a.shape[2:], dtype=a.dtype)
            y[:, rows] = a
        self.cache = (task, n_in.size, n_out.size, rows, cols, x_sub, W_sub, z, zh, drop) \
            if training else None
        return y

    def backward(self, grad_y, task, m_out, m_in, rule=OR):
        """Gradients for the last training-mode forward pass.

        ``m_out``/``m_in`` are the learnable masks; a weight receives its
        gradient iff ``m_out[i] (rule) m_in[j]``. Normalization gradients are
        reported for ``task`` over every visible feature.
        """
        if self.cache is None:
            raise UsageError(f"layer {self.layer_id}: backward without a training forward")
        c_task, len_in, len_out, rows, cols, x_sub, W_sub, z, zh, drop = self.cache
        if c_task != task:
            raise UsageError(f"layer {self.layer_id}: cached forward was for task {c_task}")
        m_out = np.asarray(m_out, dtype=bool)
        m_in = np.asarray(m_in, dtype=bool)
        if m_out.size != len_out or m_in.size != len_in:
            raise DimensionError(f"layer {self.layer_id}: learnable mask length mismatch")
        g = grad_y[:, rows]
        if drop is not None:
            g = g * drop
        g = g * (zh > 0)
        grads = {}
        if self.use_fn:
            gamma, _ = self._fn_params(task)
            g_gamma = np.zeros(len_out, dtype=self.dtype)
            g_beta = np.zeros(len_out, dtype=self.dtype)
            g_gamma[rows] = self._reduce(g * z)
            g_beta[rows] = self._reduce(g)
            grads["gamma"] = g_gamma
            grads["beta"] = g_beta
            g = g * self._bcast(gamma[rows])
        gW_sub, gb_sub, gx_sub = self._linear_backward(x_sub, W_sub, g)
        wmask = _weight_mask(m_out[rows], m_in[cols], rule)
        gW = np.zeros_like(self.W)
        gW[np.ix_(rows, cols)] = np.where(self._wmask_shape(wmask), gW_sub, 0)
        gb = np.zeros_like(self.b)
        gb[rows] = np.where(m_out[rows], gb_sub, 0)
        grads["W"] = gW
        grads["b"] = gb
        if cols.size == len_in:
            gx = gx_sub
        else:
            gx = np.zeros((gx_sub.shape[0], len_in) + gx_sub.shape[2:], dtype=gx_sub.dtype)
            gx[:, cols] = gx_sub
        self.cache = None
        return gx, grads

    def forward_binary(self, x, task, m_in, m_out, training=False, rng=None):
        """Forward with disjoint binary masks: only task-owned features are used."""
        return self.forward(x, task, m_in, m_out, training, rng)

    def backward_binary(self, grad_y, task, m_out, m_in):
        return self.backward(grad_y, task, m_out, m_in, rule=AND)

    def apply(self, grads, lr, task):
        """SGD step. Entries with zero gradient are left bit-identical."""
        for name in ("W", "b"):
            g = grads[name]
            p = getattr(self, name)
            np.subtract(p, p.dtype.type(lr) * g, out=p, where=g != 0)
        if self.use_fn and "gamma" in grads:
            gamma, beta = self.fn[task]
            for p, g in ((gamma, grads["gamma"]), (beta, grads["beta"])):
                np.subtract(p, p.dtype.type(lr) * g, out=p, where=g != 0)

    # -- growth -------------------------------------------------------------

    def grow(self, add_in, add_out, rng):
        """Append ``add_out`` output features and ``add_in`` input features.

        The existing block is copied untouched; every new weight and bias is
        drawn with the post-growth fan-in.
        """
        p, q = self.W.shape[:2]
        new_shape = (p + add_out, q + add_in) + self.W.shape[2:]
        if add_in == 0 and add_out == 0:
            return
        fresh = init_uniform(new_shape, self._fan_in(q + add_in), rng, self.dtype)
        fresh[:p, :q] = self.W
        self.W = fresh
        b = init_uniform((p + add_out,), self._fan_in(q + add_in), rng, self.dtype)
        b[:p] = self.b
        self.b = b

    def _wmask_shape(self, wmask):
        return wmask

    def param_arrays(self):
        out = [("W", self.W), ("b", self.b)]
        for t in sorted(self.fn):
            out += [(f"gamma{t}", self.fn[t][0]), (f"beta{t}", self.fn[t][1])]
        return out

    def astype(self, dtype):
        self.W = self.W.astype(dtype)
        self.b = self.b.astype(dtype)
        self.fn = {t: (g.astype(dtype), b.astype(dtype)) for t, (g, b) in self.fn.items()}


class MaskedDense(_MaskedLayer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng, layer_id=0, use_fn=True,
                 dropout_p=0.0, dtype=np.float32):
        super().__init__(layer_id, use_fn, dropout_p)
        self.W = init_uniform((out_features, in_features), max(in_features, 1), rng, dtype)
        self.b = init_uniform((out_features,), max(in_features, 1), rng, dtype)

    def _fan_in(self, q):
        return max(q, 1)

    def _linear(self, x, W, b):
        return x @ W.T + b

    def _linear_backward(self, x, W, g):
        return g.T @ x, g.sum(axis=0), g @ W


class MaskedConv(_MaskedLayer):
    """Convolution whose features are output channels."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, pad=0,
                 layer_id=0, use_fn=True, dropout_p=0.0, dtype=np.float32):
        super().__init__(layer_id, use_fn, dropout_p)
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        fan = max(in_channels * kernel * kernel, 1)
        self.W = init_uniform((out_channels, in_channels, kernel, kernel), fan, rng, dtype)
        self.b = init_uniform((out_channels,), fan, rng, dtype)

    def _fan_in(self, q):
        return max(q * self.kernel * self.kernel, 1)

    def _bcast(self, v):
        return v[None, :, None, None]

    def _reduce(self, g):
        return g.sum(axis=(0, 2, 3))

    def _wmask_shape(self, wmask):
        return wmask[:, :, None, None]

    def _linear(self, x, W, b):
        return conv2d(x, W, self.stride, self.pad) + b[None, :, None, None]

    def _linear_backward(self, x, W, g):
        gx, gW = conv2d_backward(x, W, g, self.stride, self.pad)
        return gW, g.sum(axis=(0, 2, 3)), gx


class MaxPool:
    kind = "pool"

    def __init__(self, kernel=2, stride=2):
        self.kernel = kernel
        self.stride = stride
        self.cache = None

    def forward(self, x, training=False):
        out, arg = maxpool2d(x, self.kernel, self.stride)
        self.cache = (arg, x.shape) if training else None
        return out

    def backward(self, grad):
        if self.cache is None:
            raise UsageError("pool backward without a training forward")
        arg, shape = self.cache
        self.cache = None
        return maxpool2d_backward(grad, arg, shape, self.kernel, self.stride)


class Flatten:
    kind = "flatten"

    def __init__(self):
        self.cache = None

    def forward(self, x, training=False):
        self.cache = x.shape if training else None
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        if self.cache is None:
            raise UsageError("flatten backward without a training forward")
        shape, self.cache = self.cache, None
        return grad.reshape(shape)


class TaskHead:
    """Task-private linear classifier on top of the last feature layer."""

    def __init__(self, task_id, in_features, n_classes, rng, dtype=np.float32):
        self.task_id = task_id
        self.W = init_uniform((n_classes, in_features), max(in_features, 1), rng, dtype)
        self.b = init_uniform((n_classes,), max(in_features, 1), rng, dtype)

    @property
    def n_classes(self):
        return self.W.shape[0]

    def forward(self, x):
        if x.shape[1] != self.W.shape[1]:
            raise DimensionError(
                f"head {self.task_id} expects {self.W.shape[1]} features, got {x.shape[1]}")
        return x @ self.W.T + self.b

    def backward(self, x, grad_logits):
        return grad_logits @ self.W, {"W": grad_logits.T @ x, "b": grad_logits.sum(axis=0)}

    def apply(self, grads, lr):
        self.W -= self.W.dtype.type(lr) * grads["W"]
        self.b -= self.b.dtype.type(lr) * grads["b"]

    def astype(self, dtype):
        self.W = self.W.astype(dtype)
        self.b = self.b.astype(dtype)
