"""Wall-clock scaling of attention mechanisms over sequence length."""

import csv
import io
import json
import time
import tracemalloc
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .attention import (AttentionConfig, canonical_attention, flow_attention_causal,
                        flow_attention_normal, flow_oracle_dense, linear_attention_baseline)
from .errors import ContractError, ResourceError

WARMUP = 3
DENSE_CAP = 4096 * 4096


def fit_scaling(lengths, times):
    """Least-squares line through ``(log n, log t)``; returns ``(exponent, intercept)``."""
    lengths = np.asarray(lengths, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if len(lengths) < 3 or len(lengths) != len(times):
        raise ContractError("scaling fit needs at least 3 (length, time) pairs")
    if np.any(times <= 0) or np.any(lengths <= 0):
        raise ContractError("scaling fit needs positive lengths and times")
    slope, intercept = np.polyfit(np.log(lengths), np.log(times), 1)
    return float(slope), float(intercept)


def _kernel(mechanism, heads):
    if mechanism == "canonical":
        return lambda q, k, v: canonical_attention(q, k, v, heads=heads)
    if mechanism == "linear_baseline":
        return lambda q, k, v: linear_attention_baseline(q, k, v, heads=heads)
    if mechanism == "flow_normal":
        cfg = AttentionConfig(heads=heads)
        return lambda q, k, v: flow_attention_normal(q, k, v, cfg)[0]
    if mechanism == "flow_causal":
        cfg = AttentionConfig(mechanism="flow_causal", heads=heads)
        return lambda q, k, v: flow_attention_causal(q, k, v, cfg)[0]
    if mechanism == "flow_oracle":
        cfg = AttentionConfig(mechanism="flow_oracle", heads=heads)
        return lambda q, k, v: flow_oracle_dense(q, k, v, cfg)
    raise ContractError(f"unknown mechanism {mechanism!r}")


def _step(kernel, q, k, v, with_backward):
    if not with_backward:
        return lambda: kernel(q, k, v)

    def run():
        tape = ad.Tape()
        qv, kv, vv = tape.param("q", q), tape.param("k", k), tape.param("v", v)
        ad.backward(tape, kernel(qv, kv, vv).sum())
    return run


@dataclass
class BenchRow:
    mechanism: str
    length: int
    median_s: float = None        # None: out of memory / over the dense cap
    q1_s: float = None
    q3_s: float = None
    peak_bytes: int = None

    @property
    def steps_per_sec(self):
        return None if self.median_s is None else 1.0 / self.median_s


@dataclass
class BenchReport:
    rows: list
    exponents: dict = field(default_factory=dict)   # mechanism -> (exponent, intercept)
    settings: dict = field(default_factory=dict)

    def series(self, mechanism):
        pts = [(r.length, r.median_s) for r in self.rows
               if r.mechanism == mechanism and r.median_s is not None]
        return [p[0] for p in pts], [p[1] for p in pts]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["mechanism", "length", "median_s", "q1_s", "q3_s", "steps_per_sec", "peak_bytes"])
        for r in self.rows:
            w.writerow([r.mechanism, r.length, r.median_s, r.q1_s, r.q3_s, r.steps_per_sec, r.peak_bytes])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({"settings": self.settings,
                           "rows": [dict(asdict(r), steps_per_sec=r.steps_per_sec) for r in self.rows],
                           "exponents": {m: {"exponent": e, "intercept": c}
                                         for m, (e, c) in self.exponents.items()}}, indent=2)

    def table(self):
        """Steps per second, one row per mechanism; '-' marks an absent point."""
        lengths = sorted({r.length for r in self.rows})
        mechs = list(dict.fromkeys(r.mechanism for r in self.rows))
        head = f"{'mechanism':<16}" + "".join(f"{n:>12}" for n in lengths) + f"{'exponent':>10}"
        lines = [head, "-" * len(head)]
        by_key = {(r.mechanism, r.length): r for r in self.rows}
        for m in mechs:
            cells = []
            for n in lengths:
                sps = by_key[(m, n)].steps_per_sec
                cells.append(f"{'-' if sps is None else f'{sps:.2f}':>12}")
            exp = self.exponents.get(m)
            lines.append(f"{m:<16}" + "".join(cells) + f"{'-' if exp is None else f'{exp[0]:.2f}':>10}")
        return "\n".join(lines)


def bench_attention(mechanisms, lengths, d=64, heads=4, reps=5, with_backward=False,
                    batch=1, seed=0, dtype="float64", threads=1, warmup=WARMUP,
                    dense_cap=DENSE_CAP, measure_memory=True):
    """Median wall-clock per call for each (mechanism, length).

    Inputs are seeded and shared by all mechanisms at a length. Dense
    mechanisms whose score matrix would exceed ``dense_cap`` entries, or that
    raise MemoryError, are recorded as absent points. Peak allocation is
    measured in a separate, untimed call.
    """
    lengths = list(lengths)
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ContractError("lengths must be strictly increasing")
    if reps < 5:
        raise ContractError("at least 5 repetitions are required")
    rows = []
    with threadpool_limits(limits=threads):
        for n in lengths:
            rng = np.random.default_rng([seed, n])
            shape = (batch, n, d) if batch > 1 else (n, d)
            q, k, v = (rng.standard_normal(shape).astype(dtype) for _ in range(3))
            for mech in mechanisms:
                row = BenchRow(mech, n)
                rows.append(row)
                if mech in ("canonical", "flow_oracle") and n * n > dense_cap:
                    continue
                fn = _step(_kernel(mech, heads), q, k, v, with_backward)
                try:
                    for _ in range(warmup):
                        fn()
                    times = []
                    for _ in range(reps):
                        t0 = time.perf_counter()
                        fn()
                        times.append(time.perf_counter() - t0)
                    if measure_memory:
                        tracemalloc.start()
                        fn()
                        row.peak_bytes = tracemalloc.get_traced_memory()[1]
                        tracemalloc.stop()
                except (MemoryError, ResourceError):
                    if tracemalloc.is_tracing():
                        tracemalloc.stop()
                    continue
                row.median_s = float(np.median(times))
                row.q1_s, row.q3_s = (float(x) for x in np.percentile(times, [25, 75]))
    report = BenchReport(rows, settings={"d": d, "heads": heads, "reps": reps, "batch": batch,
                                         "with_backward": with_backward, "dtype": dtype,
                                         "threads": threads})
    for mech in mechanisms:
        ns, ts = report.series(mech)
        if len(ns) >= 3:
            report.exponents[mech] = fit_scaling(ns, ts)
    return report
