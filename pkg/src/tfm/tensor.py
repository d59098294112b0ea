"""Dense numeric substrate.

Tensors are plain ``numpy`` arrays, float32 unless a caller explicitly asks
for float64 (gradient checks do). Convolution uses a strided-window im2col.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NonFiniteError

DTYPE = np.float32


def as_tensor(data, dtype=DTYPE):
    return np.ascontiguousarray(data, dtype=dtype)


def check_finite(t, what="tensor"):
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def make_rng(seed):
    """Return a ``numpy`` Generator for a 64-bit seed (or a SeedSequence)."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if seed is None or int(seed) < 0 or int(seed) >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_rngs(seed, n):
    """``n`` independent generators derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [make_rng(c) for c in children]


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def conv_output_size(size, k, stride, pad):
    if stride < 1 or k > size + 2 * pad:
        raise DimensionError(
            f"invalid conv geometry: size={size} k={k} stride={stride} pad={pad}")
    return (size + 2 * pad - k) // stride + 1


def _windows(x, k, stride, pad):
    # x: (B, C, H, W) -> (B, C, H', W', k, k)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernels, stride=1, pad=0):
    """Cross-correlation of ``x`` (C,H,W or B,C,H,W) with ``kernels`` (O,C,k,k)."""
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: {x.shape} * {kernels.shape}")
    k = kernels.shape[2]
    if kernels.shape[3] != k:
        raise DimensionError("only square kernels are supported")
    conv_output_size(x.shape[2], k, stride, pad)
    conv_output_size(x.shape[3], k, stride, pad)
    win = _windows(x, k, stride, pad)
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3]))  # B,H',W',O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if single else out


def conv2d_backward(x, kernels, grad_out, stride=1, pad=0):
    """Gradients of a batched conv2d w.r.t. its input and kernels."""
    k = kernels.shape[2]
    win = _windows(x, k, stride, pad)
    grad_k = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    b, c, h, w = x.shape
    ho, wo = grad_out.shape[2:]
    grad_xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(grad_out, kernels[:, :, i, j], axes=([1], [0]))
            grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                contrib.transpose(0, 3, 1, 2)
    grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w] if pad else grad_xp
    return np.ascontiguousarray(grad_x), grad_k.astype(kernels.dtype, copy=False)


def maxpool2d(x, k=2, stride=2):
    """Max-pool a (B,C,H,W) batch. Returns output and argmax indices for backward."""
    win = _windows(x, k, stride, 0)
    flat = win.reshape(win.shape[:4] + (k * k,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2d_backward(grad_out, arg, in_shape, k=2, stride=2):
    grad_x = np.zeros(in_shape, dtype=grad_out.dtype)
    ho, wo = grad_out.shape[2:]
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            grad_x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                np.where(hit, grad_out, 0)
    return grad_x


def init_uniform(shape, fan_in, rng, dtype=DTYPE):
    """I.i.d. draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
