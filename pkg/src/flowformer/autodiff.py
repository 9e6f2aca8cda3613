"""Tape-based reverse-mode differentiation.

Every primitive in this module accepts either plain arrays or :class:`Var`
values. With arrays only it returns an array and records nothing, so model
and attention code is written once and runs both with and without a tape::

    tape = Tape()
    x = tape.param("x", np.zeros(3))
    loss = sigmoid(x).sum()
    grads = backward(tape, loss)      # {"x": array([0.25, 0.25, 0.25])}
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is already topological.
    A tape is single-writer; use one tape per forward/backward pass.
    """

    def __init__(self):
        self.ops = []
        self.parents = []
        self.vjps = []
        self.params = {}
        self.param_values = {}

    def __len__(self):
        return len(self.ops)

    def param(self, name, value):
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        var = self._push("param", np.asarray(value), (), None)
        self.params[name] = var.index
        self.param_values[name] = var.value
        return var

    def _push(self, op, value, parents, vjp):
        var = Var(value, self, len(self.ops))
        self.ops.append(op)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return var

    def record(self, op, value, inputs, vjp):
        """Append a node. ``vjp(g)`` returns one cotangent per entry of ``inputs``;
        entries for non-Var inputs are discarded."""
        parents = tuple(x.index if isinstance(x, Var) else None for x in inputs)
        return self._push(op, value, parents, vjp)


class Var:
    """A value tracked on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    dtype = property(lambda self: self.value.dtype)

    def __repr__(self):
        return f"Var(shape={self.shape}, op={self.tape.ops[self.index]!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value(x):
    """The underlying array of ``x`` (no copy for arrays)."""
    return x.value if isinstance(x, Var) else x


def detach(x):
    return np.array(value(x), copy=True)


def _tape(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands belong to different tapes")
    return tape


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    tape = _tape(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record("add", out, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    tape = _tape(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record("sub", out, (a, b),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    tape = _tape(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        ga = _unbroadcast(g * bv, sa) if isinstance(a, Var) else None
        gb = _unbroadcast(g * av, sb) if isinstance(b, Var) else None
        return ga, gb
    return tape.record("mul", out, (a, b), vjp)


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    tape = _tape(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        ga = _unbroadcast(g / bv, sa) if isinstance(a, Var) else None
        gb = _unbroadcast(-g * out / bv, sb) if isinstance(b, Var) else None
        return ga, gb
    return tape.record("div", out, (a, b), vjp)


def neg(a):
    if not isinstance(a, Var):
        return -a
    return a.tape.record("neg", -a.value, (a,), lambda g: (-g,))


def stable_div(num, den, eps=T.DEFAULT_EPS):
    """Differentiable :func:`flowformer.tensor.stable_div`."""
    nv, dv = value(num), value(den)
    out = T.stable_div(nv, dv, eps)
    tape = _tape(num, den)
    if tape is None:
        return out
    sn, sd = np.shape(nv), np.shape(dv)
    shifted = dv + eps

    def vjp(g):
        gn = _unbroadcast(g / shifted, sn) if isinstance(num, Var) else None
        gd = _unbroadcast(-g * out / shifted, sd) if isinstance(den, Var) else None
        return gn, gd
    return tape.record("stable_div", out, (num, den), vjp)


# -- unary maps ---------------------------------------------------------------

def exp(x):
    if not isinstance(x, Var):
        return np.exp(x)
    y = np.exp(x.value)
    return x.tape.record("exp", y, (x,), lambda g: (g * y,))


def log(x):
    if not isinstance(x, Var):
        return np.log(x)
    xv = x.value
    return x.tape.record("log", np.log(xv), (x,), lambda g: (g / xv,))


def sigmoid(x):
    if not isinstance(x, Var):
        return T.sigmoid(x)
    y = T.sigmoid(x.value)
    return x.tape.record("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def relu(x):
    if not isinstance(x, Var):
        return T.relu(x)
    xv = x.value
    return x.tape.record("relu", T.relu(xv), (x,), lambda g: (g * (xv > 0),))


def elu_plus_one(x):
    if not isinstance(x, Var):
        return T.elu_plus_one(x)
    xv = x.value
    y = T.elu_plus_one(xv)
    return x.tape.record("elu_plus_one", y, (x,),
                         lambda g: (g * np.where(xv > 0, 1.0, y),))


def gelu(x):
    if not isinstance(x, Var):
        return T.gelu(x)
    xv = x.value
    inner = T._GELU_C * (xv + 0.044715 * xv * xv * xv)
    th = np.tanh(inner)
    y = 0.5 * xv * (1 + th)

    def vjp(g):
        dinner = T._GELU_C * (1 + 3 * 0.044715 * xv * xv)
        return (g * (0.5 * (1 + th) + 0.5 * xv * (1 - th * th) * dinner),)
    return x.tape.record("gelu", y, (x,), vjp)


# -- reductions and shape ------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return x.tape.record("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    shape = value(x).shape
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = x.shape
    return x.tape.record("reshape", x.value.reshape(shape), (x,),
                         lambda g: (g.reshape(old),))


def swapaxes(x, a1, a2):
    if not isinstance(x, Var):
        return np.swapaxes(x, a1, a2)
    return x.tape.record("swapaxes", np.swapaxes(x.value, a1, a2), (x,),
                         lambda g: (np.swapaxes(g, a1, a2),))


def expand_dims(x, axis):
    if not isinstance(x, Var):
        return np.expand_dims(x, axis)
    return x.tape.record("expand_dims", np.expand_dims(x.value, axis), (x,),
                         lambda g: (np.squeeze(g, axis),))


def getitem(x, idx):
    if not isinstance(x, Var):
        return x[idx]
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, idx, g)
        return (gx,)
    return x.tape.record("getitem", x.value[idx], (x,), vjp)


def take_rows(table, ids):
    """Gather rows of a 2-D ``table`` by integer ``ids`` (embedding lookup)."""
    ids = np.asarray(ids)
    if not isinstance(table, Var):
        return table[ids]
    shape, dtype = table.shape, table.dtype

    def vjp(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)
    return table.tape.record("take_rows", table.value[ids], (table,), vjp)


def split_heads(x, heads):
    d = value(x).shape[-1]
    T.split_heads(value(x)[..., :1, :], heads)  # validates divisibility
    return reshape(x, (*value(x).shape[:-1], heads, d // heads))


def merge_heads(x):
    s = value(x).shape
    return reshape(x, (*s[:-2], s[-2] * s[-1]))


# -- contractions --------------------------------------------------------------

def matmul(a, b):
    av, bv = value(a), value(b)
    out = T.matmul(av, bv)
    tape = _tape(a, b)
    if tape is None:
        return out
    sa, sb = av.shape, bv.shape

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), sa) if isinstance(a, Var) else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, sb) if isinstance(b, Var) else None
        return ga, gb
    return tape.record("matmul", out, (a, b), vjp)


def causal_dot_product(q, k, v):
    """``out_i = q_i . sum_{j<=i} k_j^T v_j`` over axis -3 of ``(..., n, h, e)`` inputs.

    One running ``e x e'`` state per head, so cost is linear in n.
    """
    qv, kv, vv = value(q), value(k), value(v)
    tape = _tape(q, k, v)
    if tape is None:
        return _causal_dot_product_blocked(qv, kv, vv)
    state = np.cumsum(kv[..., :, None] * vv[..., None, :], axis=-4)
    out = (qv[..., None, :] @ state)[..., 0, :]

    def vjp(g):
        gq = (g[..., None, :] @ np.swapaxes(state, -1, -2))[..., 0, :]
        rev = T.reverse_cumsum_axis(qv[..., :, None] * g[..., None, :], axis=-4)
        gk = (rev @ vv[..., :, None])[..., 0]
        gv = (kv[..., None, :] @ rev)[..., 0, :]
        return gq, gk, gv
    return tape.record("causal_dot_product", out, (q, k, v), vjp)


def _causal_dot_product_blocked(qv, kv, vv, block=64):
    """Same sums as the materialised prefix state, ``block`` positions at a time.

    Seeding each block's first outer product with the running state keeps the
    left-to-right accumulation order, so results match bit for bit while the
    working set stays ``block x h x e x e'``.
    """
    n = qv.shape[-3]
    out = np.empty(qv.shape[:-1] + vv.shape[-1:], dtype=np.result_type(qv, kv, vv))
    carry = None
    for start in range(0, n, block):
        sl = slice(start, min(start + block, n))
        state = kv[..., sl, :, :, None] * vv[..., sl, :, None, :]
        if carry is not None:
            state[..., 0, :, :, :] += carry
        np.cumsum(state, axis=-4, out=state)
        out[..., sl, :, :] = (qv[..., sl, :, None, :] @ state)[..., 0, :]
        carry = state[..., -1, :, :, :]
    return out


# -- normalisations -------------------------------------------------------------

def softmax(x, axis=-1):
    if not isinstance(x, Var):
        return T.softmax_axis(x, axis)
    y = T.softmax_axis(x.value, axis)
    return x.tape.record("softmax", y, (x,),
                         lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def causal_softmax(x, axis=0):
    """Prefix-normalised softmax ``exp(x_t) / sum_{s<=t} exp(x_s)``."""
    if not isinstance(x, Var):
        return T.causal_softmax_axis(x, axis)
    xv = x.value
    lse = T.logcumsumexp_axis(xv, axis)
    y = np.exp(xv - lse)

    def vjp(g):
        # d y_i / d x_j = y_i (delta_ij - exp(x_j - lse_i)) for j <= i
        top = np.take(lse, [-1], axis=axis)
        tail = T.reverse_cumsum_axis(g * y * np.exp(top - lse), axis)
        return (g * y - np.exp(xv - top) * tail,)
    return x.tape.record("causal_softmax", y, (x,), vjp)


def cumsum(x, axis=0):
    if not isinstance(x, Var):
        return T.cumsum_axis(x, axis)
    return x.tape.record("cumsum", T.cumsum_axis(x.value, axis), (x,),
                         lambda g: (T.reverse_cumsum_axis(g, axis),))


def layer_norm(x, gamma, beta, eps=T.DEFAULT_EPS):
    xv, gv, bv = value(x), value(gamma), value(beta)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gv + bv
    tape = _tape(x, gamma, beta)
    if tape is None:
        return out
    lead = tuple(range(xv.ndim - 1))

    def vjp(g):
        dxhat = g * gv
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return tape.record("layer_norm", out, (x, gamma, beta), vjp)


def softmax_cross_entropy(logits, targets, mask):
    """Mean negative log-likelihood of integer ``targets`` over positions where
    ``mask`` is non-zero. ``logits`` carries the class axis last."""
    lv = value(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=lv.dtype)
    count = mask.sum()
    if count <= 0:
        raise ContractError("cross-entropy over an all-masked batch")
    logp = T.log_softmax_axis(lv, -1)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * mask).sum() / count, dtype=lv.dtype)
    if not isinstance(logits, Var):
        return out

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1, axis=-1)
        return (grad * (mask / count)[..., None] * g,)
    return logits.tape.record("softmax_cross_entropy", out, (logits,), vjp)


# -- driver -----------------------------------------------------------------------

def backward(tape, loss):
    """Reverse sweep from scalar ``loss``; returns ``{param name: gradient}``.

    Cotangents add up at fan-out. Parameters the loss does not reach get zeros.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ContractError("loss is not a node of this tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        parents = tape.parents[i]
        if g is None or not parents:
            continue
        for p, gp in zip(parents, tape.vjps[i](g)):
            if p is None or gp is None:
                continue
            grads[p] = gp if grads[p] is None else grads[p] + gp
    result = {}
    for name, idx in tape.params.items():
        g = grads[idx] if idx < len(grads) else None
        result[name] = np.zeros_like(tape.param_values[name]) if g is None else g
    return result


def value_and_grad(f, params):
    """Evaluate scalar ``f(vars)`` on a fresh tape; return ``(loss, grads)``."""
    tape = Tape()
    xs = {name: tape.param(name, v) for name, v in params.items()}
    loss = f(xs)
    return float(value(loss)), backward(tape, loss)


# -- finite differences -----------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error of analytic vs central-difference gradients."""

    errors: dict = field(default_factory=dict)
    step: float = 1e-5

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def passed(self, tol):
        return self.max_error <= tol


_STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)),
}


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(f, params, h=1e-5, order=2):
    """Compare :func:`backward` against central differences for every coordinate.

    ``f`` maps a dict of named inputs to a scalar and must accept both arrays
    and :class:`Var` values. Inputs must be float64. ``order=4`` uses the
    five-point stencil, which tolerates a larger ``h`` and so loses less to
    roundoff on tiny gradient entries.
    """
    if order not in _STENCILS:
        raise DomainError(f"order must be one of {sorted(_STENCILS)}, got {order}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise DomainError(f"parameter {name!r} must be float64 for finite differences")
    _, grads = value_and_grad(f, params)
    report = GradCheckReport(step=h)
    stencil = _STENCILS[order]
    for name, p in params.items():
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            total = 0.0
            for offset, weight in stencil:
                flat[i] = orig + offset * h
                total += weight * float(f(params))
            flat[i] = orig
            numeric.reshape(-1)[i] = total / h
        report.errors[name] = float(np.max(relative_error(grads[name], numeric)))
    return report
