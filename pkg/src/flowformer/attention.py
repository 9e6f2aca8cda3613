"""Attention mechanisms: canonical softmax, kernelised linear, and Flow-Attention.

Inputs are ``(..., n, d)`` arrays or :class:`~flowformer.autodiff.Var` values;
leading axes are batch axes. Multi-head kernels split channels into
``(..., n, heads, d // heads)``, so the sequence axis is -3 and the head
axis -2 inside them.

Flow-Attention treats values as *sources* and results as *sinks*. With
non-negative features ``Qf = phi(Q)`` and ``Kf = phi(K)`` the capacity on
the edge j -> i is ``Qf_i . Kf_j``. Normalising each sink's incoming and each
source's outgoing capacity to one makes sources compete (a softmax over
their conserved outgoing flow reweights V) and gates each sink by its
conserved incoming flow. Everything is computed without materialising the
n x m capacity matrix.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .errors import DimensionError, DomainError, NumericalError, ResourceError

MECHANISMS = ("canonical", "linear_baseline", "flow_normal", "flow_causal", "flow_oracle")
PHIS = ("sigmoid", "elu_plus_one", "relu")
ACTIVATIONS = ("softmax", "sigmoid")
ORACLE_CAP = 4096 * 4096


@dataclass(frozen=True)
class AttentionConfig:
    mechanism: str = "flow_normal"
    heads: int = 1
    phi: str = "sigmoid"
    competition_act: str = "softmax"
    allocation_act: str = "sigmoid"
    eps: float = T.DEFAULT_EPS
    # ablations: drop the competition reweighting / the allocation gate
    competition: bool = True
    allocation: bool = True
    # causal + sigmoid competition: also multiply by positions like the softmax path
    scale_sigmoid_competition: bool = False
    oracle_cap: int = ORACLE_CAP

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}; choose from {MECHANISMS}")
        if self.phi not in PHIS:
            raise ValueError(f"unknown phi {self.phi!r}; choose from {PHIS}")
        if self.competition_act not in ACTIVATIONS or self.allocation_act not in ACTIVATIONS:
            raise ValueError(f"activations must be one of {ACTIVATIONS}")
        if self.heads < 1:
            raise ValueError("heads must be positive")
        if not self.eps >= 0:
            raise DomainError(f"eps must be non-negative, got {self.eps}")

    @property
    def causal(self):
        return self.mechanism == "flow_causal"

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class FlowStats:
    """Detached per-head flow quantities, each ``(..., tokens, heads)``.

    ``incoming``/``outgoing`` are the raw flows, ``conserved_*`` the flows
    after the opposite side has been normalised to unit capacity.
    """

    incoming: np.ndarray
    outgoing: np.ndarray
    conserved_incoming: np.ndarray
    conserved_outgoing: np.ndarray

    def competition_weights(self):
        """Softmax of conserved outgoing flow over the source axis.

        For the causal version this is the competition distribution seen by
        the last position.
        """
        return T.softmax_axis(self.conserved_outgoing, axis=-2)

    def allocation_weights(self):
        return T.sigmoid(self.conserved_incoming)


def phi_map(x, phi="sigmoid"):
    """Non-negative feature map applied to queries and keys."""
    if phi == "sigmoid":
        return ad.sigmoid(x)
    if phi == "elu_plus_one":
        return ad.elu_plus_one(x)
    if phi == "relu":
        return ad.relu(x)
    raise ValueError(f"unknown phi {phi!r}")


def _check_qkv(Q, K, V, same_length=False):
    qs, ks, vs = ad.value(Q).shape, ad.value(K).shape, ad.value(V).shape
    if len(qs) < 2 or qs[-1] != ks[-1] or ks[:-1] != vs[:-1] or qs[:-2] != ks[:-2]:
        raise DimensionError(f"incompatible Q {qs}, K {ks}, V {vs}")
    if qs[-2] == 0 or ks[-2] == 0:
        raise DimensionError("empty sequence")
    if same_length and qs[-2] != ks[-2]:
        raise DimensionError(f"causal attention needs n == m, got {qs[-2]} and {ks[-2]}")
    return qs[-2], ks[-2]


def _mask_rows(x, mask):
    # (..., n, h, e) * (..., n) -> zero out padded tokens
    if mask is None:
        return x
    return ad.mul(x, np.asarray(mask, dtype=ad.value(x).dtype)[..., None, None])


def _heads_first(x):
    # (..., n, h, e) -> (..., h, n, e)
    return ad.swapaxes(x, -3, -2)


# -- reference attentions -----------------------------------------------------

def canonical_attention(Q, K, V, causal=False, heads=1, mask=None):
    """Softmax attention ``R_i = sum_j exp(Q_i K_j) V_j / sum_j exp(Q_i K_j)``.

    No 1/sqrt(d) temperature. ``mask`` (``(..., m)``, 1 = keep) hides padded sources.
    """
    n, m = _check_qkv(Q, K, V, same_length=causal)
    q = _heads_first(ad.split_heads(Q, heads))
    k = _heads_first(ad.split_heads(K, heads))
    v = _heads_first(ad.split_heads(V, heads))
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2))
    dtype = ad.value(scores).dtype
    if causal:
        scores = ad.add(scores, np.triu(np.full((n, m), -np.inf, dtype=dtype), 1))
    if mask is not None:
        hide = np.where(np.asarray(mask) > 0, 0.0, -np.inf).astype(dtype)
        scores = ad.add(scores, hide[..., None, None, :])
    out = ad.matmul(ad.softmax(scores, axis=-1), v)
    return ad.merge_heads(_heads_first(out))


def linear_attention_baseline(Q, K, V, heads=1, phi="elu_plus_one", eps=T.DEFAULT_EPS, mask=None):
    """Kernelised attention contracting keys with values first, O(n d^2)."""
    _check_qkv(Q, K, V)
    qf = _heads_first(phi_map(ad.split_heads(Q, heads), phi))
    kf = _heads_first(_mask_rows(phi_map(ad.split_heads(K, heads), phi), mask))
    v = _heads_first(ad.split_heads(V, heads))
    kv = ad.matmul(ad.swapaxes(kf, -1, -2), v)                  # (..., h, e, e)
    den = ad.matmul(qf, ad.swapaxes(kf.sum(axis=-2, keepdims=True), -1, -2))  # (..., h, n, 1)
    out = ad.stable_div(ad.matmul(qf, kv), den, eps)
    return ad.merge_heads(_heads_first(out))


# -- Flow-Attention, normal version ---------------------------------------------

def _flow_parts_normal(qf, kf, eps):
    """Raw and conserved flows for ``(..., n, h, e)`` features."""
    incoming = (qf * kf.sum(axis=-3, keepdims=True)).sum(axis=-1)
    outgoing = (kf * qf.sum(axis=-3, keepdims=True)).sum(axis=-1)
    k_norm = ad.stable_div(kf, ad.expand_dims(outgoing, -1), eps)
    q_norm = ad.stable_div(qf, ad.expand_dims(incoming, -1), eps)
    c_incoming = (qf * k_norm.sum(axis=-3, keepdims=True)).sum(axis=-1)
    c_outgoing = (kf * q_norm.sum(axis=-3, keepdims=True)).sum(axis=-1)
    return incoming, outgoing, c_incoming, c_outgoing, q_norm


def _stats(incoming, outgoing, c_incoming, c_outgoing):
    return FlowStats(ad.detach(incoming), ad.detach(outgoing),
                     ad.detach(c_incoming), ad.detach(c_outgoing))


def flow_quantities_normal(qf, kf, eps=T.DEFAULT_EPS):
    """Incoming/outgoing and conserved flows for non-negative ``(..., n, h, e)`` features."""
    qf, kf = np.asarray(qf), np.asarray(kf)
    if np.any(qf < 0) or np.any(kf < 0):
        raise DomainError("flow features must be non-negative")
    if qf.shape[-2:] != kf.shape[-2:]:
        raise DimensionError(f"feature shapes {qf.shape} and {kf.shape} disagree on heads/channels")
    return _stats(*_flow_parts_normal(qf, kf, eps)[:4])


def _hide_padding(x, mask):
    # padded tokens carry zero flow but would still take softmax mass
    if mask is None:
        return x
    hide = np.where(np.asarray(mask) > 0, 0.0, -np.inf).astype(ad.value(x).dtype)
    return ad.add(x, hide[..., None])


def _competition(c_outgoing, cfg, mask=None):
    if cfg.competition_act == "softmax":
        return ad.softmax(_hide_padding(c_outgoing, mask), axis=-2)
    return ad.sigmoid(c_outgoing)


def _allocation(c_incoming, cfg, mask=None):
    if cfg.allocation_act == "sigmoid":
        return ad.sigmoid(c_incoming)
    return ad.softmax(_hide_padding(c_incoming, mask), axis=-2)


def _check_finite(out, stages):
    if np.all(np.isfinite(ad.value(out))):
        return
    for stage, x in stages.items():
        bad = ~np.isfinite(ad.value(x))
        if bad.any():
            head = np.argwhere(bad)[0][-1] if stage != "output" else "?"
            raise NumericalError(f"non-finite value at stage {stage!r}, head {head}")
    raise NumericalError("non-finite attention output")


def _prepare(Q, K, V, cfg, mask, causal=False):
    _check_qkv(Q, K, V, same_length=causal)
    qf = _mask_rows(phi_map(ad.split_heads(Q, cfg.heads), cfg.phi), mask)
    kf = _mask_rows(phi_map(ad.split_heads(K, cfg.heads), cfg.phi), mask)
    v = ad.split_heads(V, cfg.heads)
    return qf, kf, v


def flow_attention_normal(Q, K, V, cfg=AttentionConfig(), mask=None):
    """Flow-Attention in linear time; returns ``(R, FlowStats)``.

    ``mask`` (``(..., n)``, 1 = real token) applies to self-attention inputs
    where Q, K and V share a length; padded tokens neither send nor receive flow.
    """
    qf, kf, v = _prepare(Q, K, V, cfg, mask)
    incoming, outgoing, c_in, c_out, q_norm = _flow_parts_normal(qf, kf, cfg.eps)
    v_hat = ad.mul(v, ad.expand_dims(_competition(c_out, cfg, mask), -1)) if cfg.competition else v
    context = ad.matmul(ad.swapaxes(_heads_first(kf), -1, -2), _heads_first(v_hat))  # (..., h, e, e)
    agg = _heads_first(ad.matmul(_heads_first(q_norm), context))
    out = ad.mul(agg, ad.expand_dims(_allocation(c_in, cfg, mask), -1)) if cfg.allocation else agg
    _check_finite(out, {"incoming": incoming, "outgoing": outgoing, "conserved_incoming": c_in,
                        "conserved_outgoing": c_out, "aggregation": agg, "output": out})
    return ad.merge_heads(out), _stats(incoming, outgoing, c_in, c_out)


def flow_oracle_dense(Q, K, V, cfg=AttentionConfig()):
    """Flow-Attention through the explicit per-head n x m capacity matrix.

    Quadratic and plain-array only; exists to check :func:`flow_attention_normal`.
    """
    Q, K, V = (np.asarray(ad.value(x)) for x in (Q, K, V))
    n, m = _check_qkv(Q, K, V)
    if n * m > cfg.oracle_cap:
        raise ResourceError(f"dense oracle needs {n}x{m} > cap {cfg.oracle_cap} entries")
    qf = phi_map(T.split_heads(Q, cfg.heads), cfg.phi)
    kf = phi_map(T.split_heads(K, cfg.heads), cfg.phi)
    v = T.split_heads(V, cfg.heads)
    _, _, c_in, c_out, q_norm = _flow_parts_normal(qf, kf, cfg.eps)
    v_hat = v * _competition(c_out, cfg)[..., None] if cfg.competition else v
    # capacity[..., h, i, j] = (Qf_i / I_i) . Kf_j
    capacity = np.swapaxes(q_norm, -3, -2) @ np.moveaxis(kf, -3, -1)
    agg = np.swapaxes(capacity @ np.swapaxes(v_hat, -3, -2), -3, -2)
    out = agg * _allocation(c_in, cfg)[..., None] if cfg.allocation else agg
    return T.merge_heads(out)


# -- Flow-Attention, causal version ---------------------------------------------

def causal_dot_product(qw, kf, vw):
    """``out_i = qw_i . sum_{j<=i} kf_j^T vw_j`` per head; ``(..., n, h, e)`` inputs."""
    qs, ks, vs = (ad.value(x).shape for x in (qw, kf, vw))
    if qs != ks or qs[:-1] != vs[:-1]:
        raise DimensionError(f"causal_dot_product shapes {qs}, {ks}, {vs} disagree")
    return ad.causal_dot_product(qw, kf, vw)


def _causal_competition(c_out, cfg, pos):
    if cfg.competition_act == "softmax":
        return ad.mul(ad.causal_softmax(c_out, axis=-2), pos)
    gate = ad.sigmoid(c_out)
    return ad.mul(gate, pos) if cfg.scale_sigmoid_competition else gate


def _causal_allocation(c_in, cfg, pos):
    if cfg.allocation_act == "sigmoid":
        return ad.sigmoid(c_in)
    return ad.mul(ad.causal_softmax(c_in, axis=-2), pos)


def flow_attention_causal(Q, K, V, cfg=AttentionConfig(mechanism="flow_causal"), mask=None):
    """Causal Flow-Attention via prefix sums; returns ``(R, FlowStats)``.

    Every flow at position t is averaged over the t visible tokens, and the
    competition softmax is taken over each prefix. Output row t depends on
    inputs at positions <= t only, bit for bit.
    """
    qf, kf, v = _prepare(Q, K, V, cfg, mask, causal=True)
    n = ad.value(qf).shape[-3]
    pos = T.positions(n, ad.value(qf).dtype)[:, None]               # (n, 1)
    eps = cfg.eps
    incoming = ad.div((qf * ad.cumsum(kf, axis=-3)).sum(axis=-1), pos)
    outgoing = ad.div((kf * ad.cumsum(qf, axis=-3)).sum(axis=-1), pos)
    k_norm = ad.stable_div(kf, ad.expand_dims(outgoing, -1), eps)
    q_norm = ad.stable_div(qf, ad.expand_dims(incoming, -1), eps)
    c_in = ad.div((qf * ad.cumsum(k_norm, axis=-3)).sum(axis=-1), pos)
    c_out = ad.div((kf * ad.cumsum(q_norm, axis=-3)).sum(axis=-1), pos)
    v_hat = ad.mul(v, ad.expand_dims(_causal_competition(c_out, cfg, pos), -1)) if cfg.competition else v
    q_w = ad.stable_div(qf, ad.expand_dims(ad.mul(incoming, pos), -1), eps)
    agg = ad.causal_dot_product(q_w, kf, v_hat)
    out = ad.mul(agg, ad.expand_dims(_causal_allocation(c_in, cfg, pos), -1)) if cfg.allocation else agg
    _check_finite(out, {"incoming": incoming, "outgoing": outgoing, "conserved_incoming": c_in,
                        "conserved_outgoing": c_out, "aggregation": agg, "output": out})
    return ad.merge_heads(out), _stats(incoming, outgoing, c_in, c_out)


def flow_oracle_causal(Q, K, V, cfg=AttentionConfig(mechanism="flow_causal")):
    """Causal Flow-Attention recomputed from scratch for every prefix with scalar loops.

    Quadratic in n and slow; single sequence ``(n, d)`` only.
    """
    Q, K, V = (np.asarray(ad.value(x), dtype=np.float64) for x in (Q, K, V))
    n, _ = _check_qkv(Q, K, V, same_length=True)
    if Q.ndim != 2:
        raise DimensionError("the prefix oracle takes a single (n, d) sequence")
    h, eps = cfg.heads, cfg.eps
    qf = phi_map(T.split_heads(Q, h), cfg.phi)
    kf = phi_map(T.split_heads(K, h), cfg.phi)
    v = T.split_heads(V, h)
    out = np.zeros_like(v)

    def dot(a, b):
        return sum(float(x) * float(y) for x, y in zip(a, b))

    for head in range(h):
        q, k = qf[:, head], kf[:, head]
        # raw flows of every position over its own prefix
        inc = [sum(dot(q[t], k[j]) for j in range(t + 1)) / (t + 1) for t in range(n)]
        outg = [sum(dot(k[t], q[i]) for i in range(t + 1)) / (t + 1) for t in range(n)]
        c_in = [sum(dot(q[t], k[j] / (outg[j] + eps)) for j in range(t + 1)) / (t + 1)
                for t in range(n)]
        c_out = [sum(dot(k[t], q[i] / (inc[i] + eps)) for i in range(t + 1)) / (t + 1)
                 for t in range(n)]
        if cfg.competition_act == "softmax":
            comp = [np.exp(c_out[t]) / sum(np.exp(c_out[s]) for s in range(t + 1)) * (t + 1)
                    for t in range(n)]
        else:
            comp = [T.sigmoid(c_out[t]) * ((t + 1) if cfg.scale_sigmoid_competition else 1)
                    for t in range(n)]
        if cfg.allocation_act == "sigmoid":
            alloc = [T.sigmoid(c_in[t]) for t in range(n)]
        else:
            alloc = [np.exp(c_in[t]) / sum(np.exp(c_in[s]) for s in range(t + 1)) * (t + 1)
                     for t in range(n)]
        for t in range(n):
            qw = q[t] / (inc[t] * (t + 1) + eps)
            acc = np.zeros(v.shape[-1])
            for j in range(t + 1):
                weight = comp[j] if cfg.competition else 1.0
                acc += dot(qw, k[j]) * weight * v[j, head]
            out[t, head] = acc * (alloc[t] if cfg.allocation else 1.0)
    return T.merge_heads(out)


def attend(Q, K, V, cfg, mask=None):
    """Dispatch on ``cfg.mechanism``; returns ``(R, FlowStats or None)``."""
    if cfg.mechanism == "canonical":
        return canonical_attention(Q, K, V, causal=False, heads=cfg.heads, mask=mask), None
    if cfg.mechanism == "linear_baseline":
        return linear_attention_baseline(Q, K, V, heads=cfg.heads, eps=cfg.eps, mask=mask), None
    if cfg.mechanism == "flow_normal":
        return flow_attention_normal(Q, K, V, cfg, mask)
    if cfg.mechanism == "flow_causal":
        return flow_attention_causal(Q, K, V, cfg, mask)
    return flow_oracle_dense(Q, K, V, cfg), None


def conservation_residuals(qf, kf, eps=0.0):
    """Deviation from unit capacity after normalisation, per source and per sink.

    Returns ``(source_residual, sink_residual)`` shaped ``(..., m, h)`` and ``(..., n, h)``.
    """
    stats = flow_quantities_normal(qf, kf, eps)
    source = (np.asarray(kf) / (stats.outgoing[..., None] + eps)
              * np.asarray(qf).sum(axis=-3, keepdims=True)).sum(axis=-1)
    sink = (np.asarray(qf) / (stats.incoming[..., None] + eps)
            * np.asarray(kf).sum(axis=-3, keepdims=True)).sum(axis=-1)
    return source - 1.0, sink - 1.0
