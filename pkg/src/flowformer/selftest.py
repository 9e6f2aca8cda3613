"""Fixed-seed property suites run by ``flowformer selftest``.

Each suite returns ``(passed, detail)``; :func:`run_selftest` stops at the
first failure so the caller can name it.
"""

import time

import numpy as np

from . import autodiff as ad
from .attention import (AttentionConfig, conservation_residuals, flow_attention_causal,
                        flow_attention_normal, flow_oracle_causal, flow_oracle_dense, phi_map)


def max_rel_err(a, b, floor=1e-300):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def conservation_suite(seed=0, trials=20, eps=0.0, tol=1e-10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        h = int(rng.choice([1, 2, 4]))
        n, m, e = (int(x) for x in rng.integers(1, 33, size=3))
        qf = phi_map(rng.standard_normal((n, h, e)))
        kf = phi_map(rng.standard_normal((m, h, e)))
        src, sink = conservation_residuals(qf, kf, eps)
        worst = max(worst, float(np.abs(src).max()), float(np.abs(sink).max()))
    return worst <= tol, f"max |capacity - 1| = {worst:.2e}"


def oracle_suite(seed=1, trials=20, eps=1e-6, tol=1e-10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        h = int(rng.choice([1, 2, 4]))
        n, m = (int(x) for x in rng.integers(1, 33, size=2))
        d = h * int(rng.integers(1, 5))
        cfg = AttentionConfig(heads=h, eps=eps)
        q = rng.standard_normal((n, d))
        k, v = rng.standard_normal((m, d)), rng.standard_normal((m, d))
        worst = max(worst, max_rel_err(flow_attention_normal(q, k, v, cfg)[0],
                                       flow_oracle_dense(q, k, v, cfg)))
    return worst <= tol, f"max rel err vs dense oracle = {worst:.2e}"


def causality_suite(seed=2, trials=10, eps=1e-6, tol=1e-10):
    rng = np.random.default_rng(seed)
    worst, exact = 0.0, True
    for _ in range(trials):
        h = int(rng.choice([1, 2]))
        n, d = int(rng.integers(1, 13)), h * int(rng.integers(1, 4))
        cfg = AttentionConfig(mechanism="flow_causal", heads=h, eps=eps)
        q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
        out = flow_attention_causal(q, k, v, cfg)[0]
        worst = max(worst, max_rel_err(out, flow_oracle_causal(q, k, v, cfg)))
        t = int(rng.integers(0, n))
        q2, k2, v2 = q.copy(), k.copy(), v.copy()
        for x in (q2, k2, v2):
            x[t + 1:] += rng.standard_normal(x[t + 1:].shape)
        exact &= np.array_equal(flow_attention_causal(q2, k2, v2, cfg)[0][:t + 1], out[:t + 1])
    return worst <= tol and exact, f"prefix oracle rel err = {worst:.2e}, prefixes bit-identical: {exact}"


def gradient_suite(seed=3, eps=1e-6, tol=1e-4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for mech, fn in (("flow_normal", flow_attention_normal), ("flow_causal", flow_attention_causal)):
        cfg = AttentionConfig(mechanism=mech, heads=2, eps=eps)
        params = {name: rng.standard_normal((5, 4)) for name in "qkv"}
        report = ad.finite_diff_check(lambda p: fn(p["q"], p["k"], p["v"], cfg)[0].sum(), params)
        worst = max(worst, report.max_error)
    return worst <= tol, f"max rel err vs central differences = {worst:.2e}"


SUITES = {
    "conservation": conservation_suite,
    "oracle-equivalence": oracle_suite,
    "causality": causality_suite,
    "gradients": gradient_suite,
}


def run_selftest(eps=None, report=print):
    """Run every suite; returns the name of the first failing one, or None."""
    for name, suite in SUITES.items():
        t0 = time.perf_counter()
        try:
            ok, detail = suite() if eps is None else suite(eps=eps)
        except Exception as exc:       # any crash counts as a failure of that property
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        report(f"{'PASS' if ok else 'FAIL'}  {name:<20} {detail}  ({time.perf_counter() - t0:.2f}s)")
        if not ok:
            return name
    return None
