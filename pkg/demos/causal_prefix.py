"""Causal Flow-Attention is one pass of prefix sums.

Each output row must equal what you get by rerunning attention on the
prefix ending at that row. Changing later tokens must not move earlier
outputs at all, not even in the last bit.
"""

import numpy as np

from flowformer.attention import AttentionConfig, flow_attention_causal, flow_oracle_causal

rng = np.random.default_rng(1)
n, d = 12, 8
cfg = AttentionConfig(mechanism="flow_causal", heads=2)
q, k, v = (rng.standard_normal((n, d)) for _ in range(3))

out = flow_attention_causal(q, k, v, cfg)[0]
ref = flow_oracle_causal(q, k, v, cfg)
print(f"prefix-sum kernel vs per-prefix recomputation: max rel err "
      f"{np.max(np.abs(out - ref) / np.abs(ref)):.1e}")

t = 5
q2, k2, v2 = q.copy(), k.copy(), v.copy()
for x in (q2, k2, v2):
    x[t + 1:] = rng.standard_normal(x[t + 1:].shape)
out2 = flow_attention_causal(q2, k2, v2, cfg)[0]
print(f"rows 0..{t} unchanged after rewriting the future: {np.array_equal(out[:t + 1], out2[:t + 1])}")
print(f"row {t + 1} changed: {not np.array_equal(out[t + 1], out2[t + 1])}")
