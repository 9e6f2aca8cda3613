"""Flowformer: embeddings, post-norm attention/FFN blocks, and output heads.

Each block computes::

    Z = LayerNorm(Attention(X, X, X) + X)
    X = LayerNorm(FFN(Z) + Z)

Parameters live in a flat ``{name: array}`` dict so the same forward code
runs on plain arrays (inference) and on tape variables (training).
"""

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .attention import AttentionConfig, canonical_attention, attend
from .errors import ContractError, DataError, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_seq_len: int
    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn_channels: int = 0          # 0 means 4 * d
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    head_type: str = "lm"          # "lm" or "classification"
    num_classes: int = 0
    tie_embeddings: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.layers < 1:
            raise ContractError("a model needs at least one layer")
        if self.max_seq_len < 1 or self.vocab_size < 1:
            raise ContractError("vocab_size and max_seq_len must be positive")
        if self.d % self.heads:
            raise DimensionError(f"d={self.d} not divisible by heads={self.heads}")
        if self.head_type not in ("lm", "classification"):
            raise ContractError(f"unknown head_type {self.head_type!r}")
        if self.head_type == "classification" and self.num_classes < 2:
            raise ContractError("classification needs num_classes >= 2")
        if self.tie_embeddings and self.head_type != "lm":
            raise ContractError("tied embeddings only apply to the lm head")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must lie in [0, 1)")
        if self.attention.heads != self.heads:
            object.__setattr__(self, "attention", replace(self.attention, heads=self.heads))
        if not self.ffn_channels:
            object.__setattr__(self, "ffn_channels", 4 * self.d)

    @property
    def out_features(self):
        return self.vocab_size if self.head_type == "lm" else self.num_classes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["attention"] = AttentionConfig(**data.get("attention", {}))
        return cls(**data)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    training_state: dict = None     # {"step": int, "m": {...}, "v": {...}}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def parameter_shapes(cfg):
    """Ordered ``{name: shape}`` implied by ``cfg``."""
    d, f = cfg.d, cfg.ffn_channels
    shapes = {"embed.tokens": (cfg.vocab_size, d), "embed.positions": (cfg.max_seq_len, d)}
    for layer in range(cfg.layers):
        p = f"layers.{layer}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "norm1.gamma"] = (d,)
        shapes[p + "norm1.beta"] = (d,)
        shapes[p + "ffn.fc1.weight"] = (d, f)
        shapes[p + "ffn.fc1.bias"] = (f,)
        shapes[p + "ffn.fc2.weight"] = (f, d)
        shapes[p + "ffn.fc2.bias"] = (d,)
        shapes[p + "norm2.gamma"] = (d,)
        shapes[p + "norm2.beta"] = (d,)
    if not cfg.tie_embeddings:
        shapes["head.weight"] = (d, cfg.out_features)
    shapes["head.bias"] = (cfg.out_features,)
    return shapes


def init_parameters(cfg, seed=0, dtype="float64"):
    """Deterministic initial checkpoint.

    Linear weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero,
    embeddings ~ N(0, 0.02^2), layer-norm gain one and shift zero.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.startswith("embed."):
            value = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".weight"):
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = value.astype(T.DTYPES[dtype])
    return Checkpoint(cfg, params)


def validate_params(cfg, params):
    expected = parameter_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DataError(f"parameter names do not match the config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise DataError(f"{name}: shape {params[name].shape} != expected {shape}")


def _linear(x, params, name):
    return ad.add(ad.matmul(x, params[name + ".weight"]), params[name + ".bias"])


def _dropout(x, rate, rng):
    if not rate or rng is None:
        return x
    keep = (rng.random(ad.value(x).shape) >= rate) / (1.0 - rate)
    return ad.mul(x, keep.astype(ad.value(x).dtype))


def _attention_block(x, params, prefix, cfg, mask, capture):
    q = _linear(x, params, prefix + "attn.q")
    k = _linear(x, params, prefix + "attn.k")
    v = _linear(x, params, prefix + "attn.v")
    acfg = cfg.attention
    if acfg.mechanism == "canonical":
        out, stats = canonical_attention(q, k, v, causal=cfg.head_type == "lm",
                                         heads=acfg.heads, mask=mask), None
    else:
        out, stats = attend(q, k, v, acfg, mask)
    if capture is not None:
        capture.append(stats)
    return _linear(out, params, prefix + "attn.o")


def apply(params, cfg, tokens, mask=None, capture=None, rng=None):
    """Forward pass on ``(..., n)`` token ids.

    ``mask`` marks real tokens (1) versus padding (0). When ``capture`` is a
    list, the FlowStats of every layer are appended to it. ``rng`` enables
    dropout. Returns ``(..., n, vocab)`` logits for the lm head and
    ``(..., num_classes)`` for classification.
    """
    tokens = np.asarray(tokens)
    n = tokens.shape[-1]
    if n < 1 or n > cfg.max_seq_len:
        raise DimensionError(f"sequence length {n} outside [1, {cfg.max_seq_len}]")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise DataError(f"token id outside [0, {cfg.vocab_size})")
    x = ad.add(ad.take_rows(params["embed.tokens"], tokens), params["embed.positions"][:n])
    for layer in range(cfg.layers):
        p = f"layers.{layer}."
        attn = _dropout(_attention_block(x, params, p, cfg, mask, capture), cfg.dropout, rng)
        z = ad.layer_norm(ad.add(attn, x), params[p + "norm1.gamma"], params[p + "norm1.beta"])
        hidden = ad.gelu(_linear(z, params, p + "ffn.fc1"))
        ffn = _dropout(_linear(hidden, params, p + "ffn.fc2"), cfg.dropout, rng)
        x = ad.layer_norm(ad.add(ffn, z), params[p + "norm2.gamma"], params[p + "norm2.beta"])
    if cfg.head_type == "classification":
        # pool to a length-1 sequence so unbatched inputs stay matrices
        if mask is None:
            x = ad.mean(x, axis=-2, keepdims=True)
        else:
            w = np.asarray(mask, dtype=ad.value(x).dtype)
            w = w / w.sum(axis=-1, keepdims=True)
            x = ad.sum_(ad.mul(x, w[..., None]), axis=-2, keepdims=True)
    weight = (ad.swapaxes(params["embed.tokens"], 0, 1) if cfg.tie_embeddings
              else params["head.weight"])
    logits = ad.add(ad.matmul(x, weight), params["head.bias"])
    if cfg.head_type == "classification":
        logits = ad.getitem(logits, (Ellipsis, 0, slice(None)))
    return logits


def forward(model, tokens, mask=None, capture=None):
    """Logits of a :class:`Checkpoint` on ``tokens``."""
    return apply(model.params, model.config, tokens, mask=mask, capture=capture)


def parameter_count(cfg):
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))
