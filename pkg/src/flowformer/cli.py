"""Command line entry point: ``flowformer <subcommand> [flags]``.

Every run prints its fully resolved configuration as JSON before doing any
work; that JSON is itself accepted by ``--config``. Values from ``--config``
are overridden by flags given explicitly on the command line.

Exit codes: 0 success, 1 property failure, 2 usage error, 3 data error.
"""

import argparse
import itertools
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig
from .bench import bench_attention
from .checkpoint import load_checkpoint
from .errors import ContractError, DataError, DimensionError, UnsupportedOperationError
from .model import apply, init_parameters
from .selftest import run_selftest
from .training import TrainConfig, evaluate, make_task, model_for_task, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

GLOBAL_DEFAULTS = {"seed": 0, "dtype": "float64", "out": "out"}

MODEL_DEFAULTS = {
    "task": "copy", "corpus": None, "seq_len": 21, "vocab": 10, "max_depth": 3, "max_len": 128,
    "mechanism": "flow_causal", "layers": 2, "d": 64, "heads": 4, "ffn": 0, "dropout": 0.0,
    "phi": "sigmoid", "competition_act": "softmax", "allocation_act": "sigmoid",
}
TRAIN_DEFAULTS = {"steps": 1000, "batch_size": 32, "lr": 1e-3, "warmup": 100, "clip": 1.0,
                  "eval_interval": 0, "eval_batches": 4}

DEFAULTS = {
    "bench": {"mechanisms": "canonical,linear_baseline,flow_normal,flow_causal",
              "lengths": "512,1024,2048,4096", "d": 64, "heads": 4, "reps": 5,
              "with_backward": False, "batch": 1, "threads": 1, "json": False},
    "gradcheck": {"step": 1e-5, "tol": 1e-4, "primitive_tol": 1e-6},
    "train": {**MODEL_DEFAULTS, **TRAIN_DEFAULTS, "resume": None, "dtype": "float32"},
    "eval": {"checkpoint": None, "task": None, "corpus": None, "seq_len": None, "vocab": None,
             "max_depth": 3, "max_len": 128, "eval_batches": 4, "batch_size": 32},
    "dump-attn": {**MODEL_DEFAULTS, "mechanism": "flow_normal", "checkpoint": None,
                  "tokens": None, "text": None, "layer": 0, "head": None},
    "ablate": {**MODEL_DEFAULTS, **TRAIN_DEFAULTS, "axes": "competition_act,allocation_act",
               "steps": 300, "dtype": "float32"},
    "selftest": {"inject_eps": None},
}

ABLATION_AXES = {
    "phi": ("sigmoid", "elu_plus_one", "relu"),
    "competition_act": ("softmax", "sigmoid"),
    "allocation_act": ("sigmoid", "softmax"),
    "no_competition": (False, True),
    "no_allocation": (False, True),
}


class UsageError(Exception):
    pass


def _add_model_flags(p):
    p.add_argument("--task", choices=("copy", "listops", "charlm"))
    p.add_argument("--corpus", help="UTF-8 text file for --task charlm")
    p.add_argument("--seq-len", type=int, help="copy / charlm sequence length")
    p.add_argument("--vocab", type=int, help="copy-task vocabulary size")
    p.add_argument("--max-depth", type=int, help="ListOps nesting depth")
    p.add_argument("--max-len", type=int, help="ListOps maximum token count")
    p.add_argument("--mechanism", choices=("canonical", "linear_baseline", "flow_normal", "flow_causal"))
    p.add_argument("--layers", type=int)
    p.add_argument("--d", type=int, help="model channels")
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn", type=int, help="FFN width (0 = 4d)")
    p.add_argument("--dropout", type=float)
    p.add_argument("--phi", choices=("sigmoid", "elu_plus_one", "relu"))
    p.add_argument("--competition-act", choices=("softmax", "sigmoid"))
    p.add_argument("--allocation-act", choices=("sigmoid", "softmax"))


def _add_train_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--clip", type=float, help="global gradient-norm clip (0 disables)")
    p.add_argument("--eval-interval", type=int, help="steps between evaluations (0 = end only)")
    p.add_argument("--eval-batches", type=int)


def build_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--dtype", choices=("float64", "float32"))
    common.add_argument("--config", help="JSON file of settings; explicit flags win")
    common.add_argument("--out", help="output directory (default ./out)")

    parser = argparse.ArgumentParser(prog="flowformer", description=__doc__.split("\n")[0],
                                     argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("bench", parents=[common], formatter_class=fmt,
                       argument_default=argparse.SUPPRESS,
                       help="time attention mechanisms across sequence lengths",
                       description="Writes OUT/bench.csv with columns: mechanism, length, median_s, "
                                   "q1_s, q3_s, steps_per_sec, peak_bytes. Empty cells mark "
                                   "points skipped for memory.")
    p.add_argument("--mechanisms", help="comma-separated mechanism names")
    p.add_argument("--lengths", help="comma-separated, strictly increasing")
    p.add_argument("--d", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--threads", type=int, help="BLAS threads inside timed regions")
    p.add_argument("--with-backward", action="store_true", help="time forward + reverse pass")
    p.add_argument("--json", action="store_true", help="print the report as JSON")

    p = sub.add_parser("gradcheck", parents=[common], argument_default=argparse.SUPPRESS,
                       help="compare analytic gradients with central differences",
                       description="Prints one row per operation: name, max relative error, tolerance, status.")
    p.add_argument("--step", type=float, help="finite-difference step")
    p.add_argument("--tol", type=float, help="tolerance for full attention kernels")
    p.add_argument("--primitive-tol", type=float, help="tolerance for primitives")

    p = sub.add_parser("train", parents=[common], argument_default=argparse.SUPPRESS,
                       help="train a micro Flowformer",
                       description="Writes OUT/checkpoint.ckpt and OUT/metrics.csv with columns: "
                                   "step, loss (mean train loss since last row), metric (eval), seconds.")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], argument_default=argparse.SUPPRESS,
                       help="evaluate a checkpoint on a task's held-out set")
    p.add_argument("--checkpoint")
    p.add_argument("--task", choices=("copy", "listops", "charlm"))
    p.add_argument("--corpus")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--eval-batches", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("dump-attn", parents=[common], argument_default=argparse.SUPPRESS,
                       help="export competition and allocation weights of one layer",
                       description="Writes OUT/competition_l<L>_h<H>.csv (columns: source, weight; "
                                   "softmax of conserved outgoing flow) and OUT/allocation_l<L>_h<H>.csv "
                                   "(columns: sink, weight; sigmoid of conserved incoming flow).")
    _add_model_flags(p)
    p.add_argument("--checkpoint", help="omit to use a seeded random init; model flags are ignored when given")
    p.add_argument("--tokens", help="comma-separated token ids")
    p.add_argument("--text", help="ListOps expression or raw text, tokenised for the task")
    p.add_argument("--layer", type=int)
    p.add_argument("--head", type=int, help="omit to dump every head")

    p = sub.add_parser("ablate", parents=[common], argument_default=argparse.SUPPRESS,
                       help="train one micro-model per configuration and compare",
                       description="Writes OUT/ablation.csv with columns: config axes..., loss, metric, default.")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--axes", help=f"comma-separated subset of {sorted(ABLATION_AXES)}")

    p = sub.add_parser("selftest", parents=[common], argument_default=argparse.SUPPRESS,
                       help="run conservation, oracle, causality and gradient suites")
    p.add_argument("--inject-eps", type=float, help=argparse.SUPPRESS)
    return parser


def resolve(args):
    """Merge defaults < --config file < explicit flags into one flat dict."""
    explicit = vars(args)
    command = explicit.pop("command")
    config_path = explicit.pop("config", None)
    defaults = {**GLOBAL_DEFAULTS, **DEFAULTS[command]}
    from_file = {}
    if config_path:
        try:
            with open(config_path) as fh:
                from_file = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {config_path}: {exc}") from None
        except ValueError as exc:
            raise UsageError(f"config {config_path} is not valid JSON: {exc}") from None
        from_file.pop("command", None)
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    return command, {**defaults, **from_file, **explicit}


def _csv_ints(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _task_from(cfg):
    name = cfg["task"]
    if name == "copy":
        return make_task("copy", seq_len=cfg["seq_len"], vocab=cfg["vocab"])
    if name == "listops":
        return make_task("listops", max_depth=cfg["max_depth"], max_len=cfg["max_len"])
    if not cfg.get("corpus"):
        raise UsageError("--task charlm needs --corpus")
    return make_task("charlm", path=cfg["corpus"], seq_len=cfg["seq_len"])


def _model_from(cfg, task, **attention_overrides):
    att = AttentionConfig(mechanism=cfg["mechanism"], phi=cfg["phi"],
                          competition_act=cfg["competition_act"],
                          allocation_act=cfg["allocation_act"], **attention_overrides)
    return model_for_task(task, layers=cfg["layers"], d=cfg["d"], heads=cfg["heads"],
                          ffn_channels=cfg["ffn"], dropout=cfg["dropout"], attention=att)


def _train_from(cfg):
    return TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       warmup=cfg["warmup"], clip_norm=cfg["clip"], seed=cfg["seed"],
                       eval_interval=cfg["eval_interval"], eval_batches=cfg["eval_batches"],
                       dtype=cfg["dtype"])


# -- subcommands ---------------------------------------------------------------------

def cmd_bench(cfg):
    report = bench_attention(cfg["mechanisms"].split(","), _csv_ints(cfg["lengths"]), d=cfg["d"],
                             heads=cfg["heads"], reps=cfg["reps"], with_backward=cfg["with_backward"],
                             batch=cfg["batch"], seed=cfg["seed"], dtype=cfg["dtype"],
                             threads=cfg["threads"])
    with open(os.path.join(cfg["out"], "bench.csv"), "w") as fh:
        fh.write(report.to_csv())
    print(report.to_json() if cfg["json"] else report.table())
    return EXIT_OK


def gradcheck_table(step=1e-5, tol=1e-4, primitive_tol=1e-6, seed=0):
    """Rows of ``(operation, max rel err, tolerance)`` for primitives and attention kernels."""
    from .attention import canonical_attention, flow_attention_causal, flow_attention_normal

    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    w = rng.standard_normal((5, 4))
    pos = np.abs(rng.standard_normal((5, 4))) + 0.5
    qkv = {name: rng.standard_normal((6, 4)) for name in "qkv"}
    g3 = {name: rng.standard_normal((5, 2, 3)) for name in "qkv"}
    cases = [
        ("matmul", lambda p: (p["x"] @ p["y"]).sum(), {"x": x, "y": y}, primitive_tol),
        ("elementwise", lambda p: ((p["x"] * p["x"] - p["x"]) / p["d"] + p["x"]).sum(),
         {"x": x, "d": pos}, primitive_tol),
        ("sigmoid", lambda p: (ad.sigmoid(p["x"]) * w).sum(), {"x": x}, primitive_tol),
        ("exp", lambda p: (ad.exp(p["x"]) * w).sum(), {"x": x}, primitive_tol),
        ("softmax_axis", lambda p: (ad.softmax(p["x"], 0) * w).sum(), {"x": x}, primitive_tol),
        ("causal_softmax", lambda p: (ad.causal_softmax(p["x"], 0) * w).sum(), {"x": x}, primitive_tol),
        ("cumsum_axis", lambda p: (ad.cumsum(p["x"], 0) * w).sum(), {"x": x}, primitive_tol),
        ("stable_div", lambda p: (ad.stable_div(p["x"], p["d"]) * w).sum(), {"x": x, "d": pos}, primitive_tol),
        ("layer_norm", lambda p: (ad.layer_norm(p["x"], p["g"], p["b"]) * w).sum(),
         {"x": x, "g": rng.standard_normal(4), "b": rng.standard_normal(4)}, primitive_tol),
        ("causal_dot_product", lambda p: (ad.causal_dot_product(p["q"], p["k"], p["v"]) * g3["q"]).sum(),
         g3, primitive_tol),
        ("canonical_attention", lambda p: canonical_attention(p["q"], p["k"], p["v"], heads=2).sum(), qkv, tol),
        ("flow_attention_normal", lambda p: flow_attention_normal(
            p["q"], p["k"], p["v"], AttentionConfig(heads=2))[0].sum(), qkv, tol),
        ("flow_attention_causal", lambda p: flow_attention_causal(
            p["q"], p["k"], p["v"], AttentionConfig(mechanism="flow_causal", heads=2))[0].sum(), qkv, tol),
    ]
    return [(name, ad.finite_diff_check(f, params, step).max_error, t) for name, f, params, t in cases]


def cmd_gradcheck(cfg):
    rows = gradcheck_table(cfg["step"], cfg["tol"], cfg["primitive_tol"], cfg["seed"])
    print(f"{'operation':<24}{'max rel err':>14}{'tolerance':>12}  status")
    failed = False
    for name, err, tol in rows:
        ok = err <= tol
        failed |= not ok
        print(f"{name:<24}{err:>14.3e}{tol:>12.1e}  {'ok' if ok else 'FAIL'}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_train(cfg):
    task = _task_from(cfg)
    init = load_checkpoint(cfg["resume"]) if cfg["resume"] else None
    model_cfg = init.config if init else _model_from(cfg, task)
    ckpt, metrics = train(model_cfg, task, _train_from(cfg), out_dir=cfg["out"], init=init,
                          progress=lambda r: print(f"step {r[0]:>6}  loss {r[1]:.4f}  "
                                                   f"{task.metric} {r[2]:.4f}  {r[3]:.1f}s", flush=True))
    print(f"wrote {os.path.join(cfg['out'], 'checkpoint.ckpt')} after step {metrics[-1][0]}")
    return EXIT_OK


def cmd_eval(cfg):
    if not cfg["checkpoint"]:
        raise UsageError("eval needs --checkpoint")
    ckpt = load_checkpoint(cfg["checkpoint"])
    mc = ckpt.config
    name = cfg["task"] or ("listops" if mc.head_type == "classification"
                           else "charlm" if cfg["corpus"] else "copy")
    task_cfg = {"task": name, "corpus": cfg["corpus"], "seq_len": cfg["seq_len"] or mc.max_seq_len,
                "vocab": cfg["vocab"] or mc.vocab_size, "max_depth": cfg["max_depth"],
                "max_len": cfg["max_len"]}
    result = evaluate(ckpt, _task_from(task_cfg), cfg["seed"], cfg["eval_batches"], cfg["batch_size"])
    out = {"loss": result["loss"], "metric": result["metric"]}
    if mc.head_type == "lm":
        out["perplexity"] = float(np.exp(result["loss"]))
    print(json.dumps(out))
    return EXIT_OK


def _dump_tokens(cfg, task):
    if cfg["tokens"]:
        return np.array(_csv_ints(cfg["tokens"]), dtype=np.int64)
    if cfg["text"]:
        if cfg["task"] == "listops":
            from .tasks import encode_listops
            return np.array(encode_listops(cfg["text"]), dtype=np.int64)
        if cfg["task"] == "charlm":
            return task.vocab.encode(cfg["text"])
        raise UsageError("--text is only understood for listops and charlm tasks")
    rng = np.random.default_rng(cfg["seed"])
    return rng.integers(0, task.vocab_size, size=min(16, cfg.get("seq_len") or 16))


def dump_attention(ckpt, tokens, layer, head, out_dir):
    """Write competition/allocation CSVs for ``layer``; returns the written paths."""
    mc = ckpt.config
    if mc.attention.mechanism in ("canonical", "linear_baseline"):
        raise UnsupportedOperationError(f"mechanism {mc.attention.mechanism!r} has no flow statistics")
    if not 0 <= layer < mc.layers:
        raise UsageError(f"layer {layer} outside [0, {mc.layers})")
    heads = range(mc.heads) if head is None else [head]
    if head is not None and not 0 <= head < mc.heads:
        raise UsageError(f"head {head} outside [0, {mc.heads})")
    os.makedirs(out_dir, exist_ok=True)
    capture = []
    apply(ckpt.params, mc, tokens, capture=capture)
    stats = capture[layer]
    comp, alloc = stats.competition_weights(), stats.allocation_weights()
    paths = []
    for h in heads:
        for kind, values, label in (("competition", comp[:, h], "source"), ("allocation", alloc[:, h], "sink")):
            path = os.path.join(out_dir, f"{kind}_l{layer}_h{h}.csv")
            with open(path, "w") as fh:
                fh.write(f"{label},weight\n")
                for i, val in enumerate(values):
                    fh.write(f"{i},{float(val)!r}\n")
            paths.append(path)
    return paths


def cmd_dump_attn(cfg):
    task = _task_from(cfg)
    if cfg["checkpoint"]:
        ckpt = load_checkpoint(cfg["checkpoint"])
    else:
        ckpt = init_parameters(_model_from(cfg, task), cfg["seed"], cfg["dtype"])
    for path in dump_attention(ckpt, _dump_tokens(cfg, task), cfg["layer"], cfg["head"], cfg["out"]):
        print(path)
    return EXIT_OK


def ablation_grid(axes):
    unknown = set(axes) - set(ABLATION_AXES)
    if unknown:
        raise UsageError(f"unknown ablation axes {sorted(unknown)}")
    return [dict(zip(axes, combo)) for combo in itertools.product(*(ABLATION_AXES[a] for a in axes))]


def _is_default(setting):
    reference = {"phi": "sigmoid", "competition_act": "softmax", "allocation_act": "sigmoid",
                 "no_competition": False, "no_allocation": False}
    return all(reference[k] == v for k, v in setting.items())


def run_ablation(cfg, axes, report=print):
    """Train one model per grid point with shared seed/steps; returns table rows."""
    task = _task_from(cfg)
    tcfg = _train_from(cfg)
    rows = []
    for setting in ablation_grid(axes):
        local = {**cfg, **{k: v for k, v in setting.items() if not k.startswith("no_")}}
        model_cfg = _model_from(local, task, competition=not setting.get("no_competition", False),
                                allocation=not setting.get("no_allocation", False))
        ckpt, metrics = train(model_cfg, task, tcfg)
        result = evaluate(ckpt, task, tcfg.seed, tcfg.eval_batches, tcfg.batch_size)
        row = {**setting, "loss": result["loss"], "metric": result["metric"],
               "default": _is_default(setting)}
        rows.append(row)
        report(row)
    return rows


def cmd_ablate(cfg):
    axes = [a for a in cfg["axes"].split(",") if a]
    rows = run_ablation(cfg, axes, report=lambda r: None)
    header = axes + ["loss", "metric", "default"]
    print("  ".join(f"{h:>16}" for h in header))
    for r in rows:
        cells = [str(r[a]) for a in axes] + [f"{r['loss']:.4f}", f"{r['metric']:.4f}",
                                             "*" if r["default"] else ""]
        print("  ".join(f"{c:>16}" for c in cells))
    with open(os.path.join(cfg["out"], "ablation.csv"), "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(r[h]) for h in header) + "\n")
    return EXIT_OK


def cmd_selftest(cfg):
    failed = run_selftest(eps=cfg["inject_eps"])
    if failed:
        print(f"selftest failed: {failed}")
        return EXIT_FAIL
    print("selftest passed")
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval,
            "dump-attn": cmd_dump_attn, "ablate": cmd_ablate, "selftest": cmd_selftest}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)      # exits with status 2 on usage errors
    try:
        command, cfg = resolve(args)
        print(json.dumps({"command": command, **cfg}, sort_keys=True), flush=True)
        os.makedirs(cfg["out"], exist_ok=True)
        return COMMANDS[command](cfg)
    except (UsageError, ContractError, UnsupportedOperationError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
