"""Dense tensor primitives on top of numpy.

Arrays are plain ``numpy.ndarray`` values in row-major order. Every function
here is pure: inputs are never modified in place.
"""

import numpy as np
from scipy.special import expit

from .errors import DimensionError, DomainError

DTYPES = {"float64": np.float64, "float32": np.float32}
MAX_RANK = 4
DEFAULT_EPS = 1e-6


def tensor(data, dtype="float64"):
    """Build a contiguous array, checking the rank and extent limits."""
    arr = np.ascontiguousarray(data, dtype=DTYPES[dtype])
    if arr.ndim > MAX_RANK:
        raise DimensionError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
    if 0 in arr.shape:
        raise DimensionError(f"zero-sized extent in shape {arr.shape}")
    return arr


def _axis(x, axis):
    nd = np.ndim(x)
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} out of range for shape {np.shape(x)}")
    return axis % nd


def matmul(a, b, ordered=False):
    """Matrix product over the last two axes (leading axes broadcast).

    With ``ordered=True`` the inner dimension is accumulated strictly left to
    right without fused multiply-add, which reproduces a scalar triple loop
    bit for bit. The default path calls BLAS, which is deterministic for a
    fixed shape but may contract in a different order.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if not ordered:
        return a @ b
    out = a[..., :, 0, None] * b[..., 0, None, :]
    for k in range(1, a.shape[-1]):
        out = out + a[..., :, k, None] * b[..., k, None, :]
    return out


def softmax_axis(x, axis=-1):
    axis = _axis(x, axis)
    z = np.asarray(x - np.max(x, axis=axis, keepdims=True))
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    np.exp(z, out=z)            # in place: one n x m temporary instead of three
    z /= np.sum(z, axis=axis, keepdims=True)
    return z


def log_softmax_axis(x, axis=-1):
    axis = _axis(x, axis)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def cumsum_axis(x, axis=0):
    """Inclusive prefix sums. Accumulation is sequential, so entry t never
    depends on entries after t."""
    return np.cumsum(x, axis=_axis(x, axis))


def reverse_cumsum_axis(x, axis=0):
    """Inclusive suffix sums; the adjoint of :func:`cumsum_axis`."""
    axis = _axis(x, axis)
    return np.flip(np.cumsum(np.flip(x, axis), axis=axis), axis)


def logcumsumexp_axis(x, axis=0):
    """``log(cumsum(exp(x)))`` evaluated as a running log-add-exp.

    Every prefix is stabilised by its own running maximum, so no value from
    later positions is consulted.
    """
    return np.logaddexp.accumulate(x, axis=_axis(x, axis))


def causal_softmax_axis(x, axis=0):
    """``exp(x_t) / sum_{s<=t} exp(x_s)`` along ``axis``."""
    return np.exp(x - logcumsumexp_axis(x, axis))


def stable_div(num, den, eps=DEFAULT_EPS):
    """Elementwise ``num / (den + eps)`` for non-negative denominators."""
    if eps < 0:
        raise DomainError(f"eps must be non-negative, got {eps}")
    den = np.asarray(den)
    if np.any(den < 0):
        raise DomainError("negative denominator: flow capacities must be non-negative")
    return num / (den + eps)


def layer_norm(x, gamma, beta, eps=DEFAULT_EPS):
    """Normalise the last axis to zero mean, unit (biased) variance, then scale and shift."""
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def sigmoid(x):
    return expit(x)


def relu(x):
    return np.maximum(x, 0)


def elu_plus_one(x):
    return np.where(x > 0, x + 1, np.exp(np.minimum(x, 0)))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    # tanh approximation
    return 0.5 * x * (1 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def transpose_last(x):
    return np.swapaxes(x, -1, -2)


def split_heads(x, heads):
    """``(..., n, d) -> (..., n, heads, d // heads)``."""
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise DimensionError(f"channel count {d} not divisible by {heads} heads")
    return x.reshape(*x.shape[:-1], heads, d // heads)


def merge_heads(x):
    """Inverse of :func:`split_heads`."""
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def positions(n, dtype=np.float64):
    """1-based positions ``[1, ..., n]``."""
    return np.arange(1, n + 1, dtype=dtype)
