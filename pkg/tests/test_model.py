import numpy as np
import pytest

from flowformer.attention import AttentionConfig
from flowformer.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from flowformer.errors import ContractError, DataError, DimensionError
from flowformer.model import (ModelConfig, apply, forward, init_parameters, parameter_count,
                              parameter_shapes)
from flowformer import tensor as T

CAUSAL = AttentionConfig(mechanism="flow_causal")


def micro(**kw):
    base = dict(vocab_size=7, max_seq_len=8, layers=1, d=4, heads=2, attention=CAUSAL)
    base.update(kw)
    return ModelConfig(**base)


def test_parameter_count_closed_form():
    L, d, vocab, ffn, max_len = 2, 64, 128, 256, 64
    embed = vocab * d + max_len * d
    attn = 4 * (d * d + d)
    norms = 2 * 2 * d
    mlp = d * ffn + ffn + ffn * d + d
    head = d * vocab + vocab
    expected = embed + L * (attn + norms + mlp) + head
    cfg = ModelConfig(vocab_size=vocab, max_seq_len=max_len, layers=L, d=d, heads=4, ffn_channels=ffn)
    assert parameter_count(cfg) == expected == 120576
    tied = ModelConfig(vocab_size=vocab, max_seq_len=max_len, layers=L, d=d, heads=4,
                       ffn_channels=ffn, tie_embeddings=True)
    assert parameter_count(tied) == expected - d * vocab


def test_init_is_deterministic_and_well_formed():
    cfg = micro(layers=2)
    a, b = init_parameters(cfg, seed=5), init_parameters(cfg, seed=5)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
        if name.endswith("gamma"):
            assert np.all(a.params[name] == 1.0)
        if name.endswith("beta") or name.endswith("bias"):
            assert np.all(a.params[name] == 0.0)
        if name.endswith(".weight"):
            assert np.abs(a.params[name]).max() <= 1 / np.sqrt(a.params[name].shape[0])
    c = init_parameters(cfg, seed=6)
    assert not np.array_equal(a.params["embed.tokens"], c.params["embed.tokens"])
    assert init_parameters(cfg, 0, "float32").dtype == np.float32


def test_config_validation():
    with pytest.raises(ContractError):
        micro(layers=0)
    with pytest.raises(DimensionError):
        micro(d=5)
    with pytest.raises(ContractError):
        micro(head_type="classification", num_classes=1)
    assert micro().ffn_channels == 16
    assert micro(heads=1).attention.heads == 1
    cfg = micro(head_type="classification", num_classes=10)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_micro_forward_shapes():
    cfg = ModelConfig(vocab_size=5, max_seq_len=4, layers=1, d=1, heads=1)
    logits = forward(init_parameters(cfg, 0), np.array([0, 3, 1]))
    assert logits.shape == (3, 5) and np.all(np.isfinite(logits))
    cls = micro(head_type="classification", num_classes=3, attention=AttentionConfig())
    assert forward(init_parameters(cls, 0), np.zeros((2, 5), int)).shape == (2, 3)


def test_forward_errors():
    ck = init_parameters(micro(), 0)
    with pytest.raises(DataError):
        forward(ck, np.array([0, 7]))
    with pytest.raises(DimensionError):
        forward(ck, np.zeros(9, int))


def test_golden_logits():
    ck = init_parameters(micro(), seed=3)
    expected = [-0.28252161652603425, -0.00497292975509331, 0.6812455717657174, -0.12248923524080509,
                -0.7160238476745984, -0.7478789313817977, 1.1828626168117644]
    np.testing.assert_allclose(forward(ck, np.array([1, 2, 3, 4]))[-1], expected, rtol=1e-12)


def test_zero_sublayer_outputs_leave_embedding_path():
    cfg = micro()
    ck = init_parameters(cfg, seed=1)
    p = dict(ck.params)
    for name in ("layers.0.attn.o.weight", "layers.0.ffn.fc2.weight"):
        p[name] = np.zeros_like(p[name])
    tokens = np.array([2, 5, 1])
    x = p["embed.tokens"][tokens] + p["embed.positions"][:3]
    x = T.layer_norm(x, p["layers.0.norm1.gamma"], p["layers.0.norm1.beta"])
    x = T.layer_norm(x, p["layers.0.norm2.gamma"], p["layers.0.norm2.beta"])
    expected = x @ p["head.weight"] + p["head.bias"]
    np.testing.assert_allclose(apply(p, cfg, tokens), expected, rtol=1e-12, atol=1e-14)


def test_causal_model_ignores_future_tokens():
    cfg = micro(layers=2, max_seq_len=12, vocab_size=11)
    ck = init_parameters(cfg, 2)
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 11, 12)
    base = forward(ck, tokens)
    for t in range(11):
        other = tokens.copy()
        other[t + 1:] = rng.integers(0, 11, 11 - t)
        np.testing.assert_array_equal(forward(ck, other)[:t + 1], base[:t + 1])


def test_mechanism_swap_keeps_parameters():
    shapes = {m: parameter_shapes(micro(attention=AttentionConfig(mechanism=m)))
              for m in ("flow_normal", "canonical", "flow_causal", "linear_baseline")}
    assert all(s == shapes["flow_normal"] for s in shapes.values())
    ck = init_parameters(micro(attention=AttentionConfig()), 0)
    for m in ("canonical", "flow_causal"):
        out = apply(ck.params, micro(attention=AttentionConfig(mechanism=m)), np.arange(5))
        assert out.shape == (5, 7)


def test_identical_tokens_stay_finite():
    for mech in ("flow_normal", "flow_causal"):
        cfg = micro(max_seq_len=64, attention=AttentionConfig(mechanism=mech))
        assert np.all(np.isfinite(forward(init_parameters(cfg, 0), np.full(64, 3))))


def test_capture_returns_flow_stats_per_layer():
    cfg = micro(layers=3)
    capture = []
    forward(init_parameters(cfg, 0), np.arange(6), capture=capture)
    assert len(capture) == 3 and capture[0].conserved_outgoing.shape == (6, 2)


def test_classification_padding_is_ignored():
    cfg = micro(head_type="classification", num_classes=4, attention=AttentionConfig(), max_seq_len=10)
    ck = init_parameters(cfg, 4)
    tokens = np.array([[3, 1, 4, 1, 5, 0, 0, 0]])
    mask = np.array([[1, 1, 1, 1, 1, 0, 0, 0]])
    padded = forward(ck, tokens, mask=mask)
    np.testing.assert_allclose(padded[0], forward(ck, tokens[:, :5])[0], rtol=1e-10)


# -- checkpoint files --------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = micro(layers=2, dropout=0.1)
    ck = init_parameters(cfg, 7, "float32")
    ck.training_state = {"step": 12, "m": {k: v * 0 + 1 for k, v in ck.params.items()},
                         "v": {k: v * 0 + 2 for k, v in ck.params.items()}}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, ck)
    assert path.read_bytes().startswith(MAGIC)
    back = load_checkpoint(path)
    assert back.config == cfg
    assert back.training_state["step"] == 12
    for k, v in ck.params.items():
        assert back.params[k].dtype == v.dtype
        np.testing.assert_array_equal(back.params[k], v)
        np.testing.assert_array_equal(back.training_state["v"][k], ck.training_state["v"][k])
    tokens = np.arange(6)
    np.testing.assert_array_equal(forward(back, tokens), forward(ck, tokens))


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(bad)
    ck = init_parameters(micro(), 0)
    path = tmp_path / "ok.ckpt"
    save_checkpoint(path, ck)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataError):
        load_checkpoint(path)
    del ck.params["head.bias"]
    save_checkpoint(path, ck)
    with pytest.raises(DataError, match="head.bias"):
        load_checkpoint(path)
