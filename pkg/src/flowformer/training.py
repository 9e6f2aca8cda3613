"""Loss, optimiser, and the deterministic training loop."""

import csv
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .errors import ContractError, NumericalError, TrainingDiverged
from .model import Checkpoint, ModelConfig, apply, init_parameters
from .tasks import LISTOPS_VOCAB, gen_copy_task, gen_listops_mini, load_char_lm


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 3e-4
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    eval_interval: int = 0          # 0: evaluate only at the end
    eval_batches: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")

    def to_dict(self):
        return asdict(self)


def cross_entropy(logits, targets, mask=None):
    """Mean token NLL over unmasked positions (log-sum-exp stabilised)."""
    if mask is None:
        mask = np.ones(np.shape(targets))
    if np.shape(mask) != np.shape(targets):
        raise ContractError(f"mask shape {np.shape(mask)} != targets shape {np.shape(targets)}")
    return ad.softmax_cross_entropy(logits, targets, mask)


def perplexity(loss):
    return math.exp(loss)


def learning_rate(cfg, step):
    """Linear warmup to ``cfg.lr`` then inverse square-root decay; ``step`` is 1-based."""
    if cfg.warmup <= 0:
        return cfg.lr
    return cfg.lr * min(step / cfg.warmup, math.sqrt(cfg.warmup / step))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads, max_norm):
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}, norm
    return grads, norm


def init_adam_state(params):
    return {"step": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params, grads, state, cfg, step=None):
    """One clipped, bias-corrected Adam update. Returns ``(params, state)``; inputs are untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    step = state["step"] + 1 if step is None else step
    grads, _ = clip_gradients(grads, cfg.clip_norm)
    lr = learning_rate(cfg, step)
    c1 = 1 - cfg.beta1 ** step
    c2 = 1 - cfg.beta2 ** step
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = cfg.beta1 * state["m"][name] + (1 - cfg.beta1) * g
        v = cfg.beta2 * state["v"][name] + (1 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_params[name] = (p - lr * update).astype(p.dtype)
        m_new[name] = m.astype(p.dtype)
        v_new[name] = v.astype(p.dtype)
    return new_params, {"step": step, "m": m_new, "v": v_new}


# -- tasks --------------------------------------------------------------------------

def _accuracy(logits, targets, mask):
    hits = (np.argmax(logits, axis=-1) == targets) * mask
    return float(hits.sum()), float(mask.sum())


class CopyTask:
    name = "copy"
    head_type = "lm"
    metric = "masked_accuracy"

    def __init__(self, seq_len=21, vocab=10):
        self.seq_len, self.vocab_size = seq_len, vocab

    def train_batch(self, seed, step, size):
        return gen_copy_task([seed, 0, step], size, self.seq_len, self.vocab_size)

    def eval_batches(self, seed, count, size):
        return [gen_copy_task([seed, 1, i], size, self.seq_len, self.vocab_size) for i in range(count)]

    def model_defaults(self):
        return {"vocab_size": self.vocab_size, "max_seq_len": self.seq_len, "head_type": "lm"}


class ListOpsTask:
    name = "listops"
    head_type = "classification"
    metric = "accuracy"
    vocab_size = LISTOPS_VOCAB

    def __init__(self, max_depth=3, max_len=128, max_args=5):
        self.max_depth, self.max_len, self.max_args = max_depth, max_len, max_args

    def _gen(self, seed, size):
        return gen_listops_mini(seed, size, self.max_depth, self.max_len, self.max_args)

    def train_batch(self, seed, step, size):
        return self._gen([seed, 0, step], size)

    def eval_batches(self, seed, count, size):
        return [self._gen([seed, 1, i], size) for i in range(count)]

    def model_defaults(self):
        return {"vocab_size": self.vocab_size, "max_seq_len": self.max_len,
                "head_type": "classification", "num_classes": 10}


class CharLMTask:
    name = "charlm"
    head_type = "lm"
    metric = "masked_accuracy"

    def __init__(self, path, seq_len=64, split_fraction=0.9):
        self.seq_len = seq_len
        self.train, self.eval, self.vocab = load_char_lm(path, seq_len, split_fraction)
        self.vocab_size = len(self.vocab)

    def train_batch(self, seed, step, size):
        return self.train.batch(np.random.default_rng([seed, 0, step]), size)

    def eval_batches(self, seed, count, size):
        stream = self.eval if len(self.eval) else self.train
        return list(stream.batches(size))[:count]

    def model_defaults(self):
        return {"vocab_size": self.vocab_size, "max_seq_len": self.seq_len, "head_type": "lm"}


def make_task(name, **kwargs):
    tasks = {"copy": CopyTask, "listops": ListOpsTask, "charlm": CharLMTask}
    if name not in tasks:
        raise ContractError(f"unknown task {name!r}; choose from {sorted(tasks)}")
    return tasks[name](**kwargs)


# -- loop -----------------------------------------------------------------------------

def batch_loss(params, cfg, batch, rng=None):
    logits = apply(params, cfg, batch.inputs, mask=batch.padding, rng=rng)
    return cross_entropy(logits, batch.targets, batch.loss_mask)


def evaluate(ckpt, task, seed=0, batches=4, batch_size=32):
    """Mean loss and task metric on the task's fixed evaluation set."""
    total_loss = hits = count = 0.0
    evals = task.eval_batches(seed, batches, batch_size)
    for batch in evals:
        logits = apply(ckpt.params, ckpt.config, batch.inputs, mask=batch.padding)
        total_loss += float(cross_entropy(logits, batch.targets, batch.loss_mask))
        h, c = _accuracy(logits, batch.targets, batch.loss_mask)
        hits, count = hits + h, count + c
    return {"loss": total_loss / len(evals), "metric": hits / count}


def _check_compatible(model_cfg, task):
    if model_cfg.head_type != task.head_type:
        raise ContractError(f"task {task.name!r} needs a {task.head_type} head, "
                            f"model has {model_cfg.head_type}")


def train(model_cfg, task, cfg, out_dir=None, init=None, progress=None):
    """Train from ``init`` (or a fresh seeded init); returns ``(Checkpoint, metrics)``.

    ``metrics`` is a list of ``(step, loss, metric, seconds)`` rows recorded at
    every evaluation, where ``loss`` is the mean training loss since the
    previous row. With ``out_dir`` the log goes to ``metrics.csv`` and a
    checkpoint to ``checkpoint.ckpt`` at each evaluation.
    """
    with threadpool_limits(limits=1):       # one BLAS thread keeps reductions reproducible
        return _train(model_cfg, task, cfg, out_dir, init, progress)


def _train(model_cfg, task, cfg, out_dir, init, progress):
    _check_compatible(model_cfg, task)
    ckpt = init or init_parameters(model_cfg, cfg.seed, cfg.dtype)
    params = ckpt.params
    state = ckpt.training_state or init_adam_state(params)
    start = state["step"]
    interval = cfg.eval_interval or cfg.steps
    dropout_rng = np.random.default_rng([cfg.seed, 2]) if model_cfg.dropout else None
    metrics, running, seen = [], 0.0, 0
    t0 = time.perf_counter()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for step in range(start + 1, start + cfg.steps + 1):
        batch = task.train_batch(cfg.seed, step, cfg.batch_size)
        tape = ad.Tape()
        variables = {k: tape.param(k, v) for k, v in params.items()}
        last_good = Checkpoint(model_cfg, params, state)
        try:
            loss = batch_loss(variables, model_cfg, batch, dropout_rng)
        except NumericalError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", last_good) from None
        loss_value = float(ad.value(loss))
        if not math.isfinite(loss_value):
            raise TrainingDiverged(f"non-finite loss at step {step}", last_good)
        grads = ad.backward(tape, loss)
        try:
            params, state = adam_step(params, grads, state, cfg, step)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"step {step}: {exc}", last_good) from None
        running += loss_value
        seen += 1
        if (step - start) % interval == 0 or step == start + cfg.steps:
            current = Checkpoint(model_cfg, params, state)
            result = evaluate(current, task, cfg.seed, cfg.eval_batches, cfg.batch_size)
            row = (step, running / seen, result["metric"], time.perf_counter() - t0)
            metrics.append(row)
            running, seen = 0.0, 0
            if progress:
                progress(row)
            if out_dir:
                save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), current)
                write_metrics(os.path.join(out_dir, "metrics.csv"), metrics)
    return Checkpoint(model_cfg, params, state), metrics


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "metric", "seconds"])
        for step, loss, metric, seconds in rows:
            w.writerow([step, repr(loss), repr(metric), f"{seconds:.3f}"])


def competition_entropy_gap(ckpt, batches):
    """Mean of ``ln(m) - H(softmax(conserved outgoing))`` over sequences, layers and heads.

    Zero means uniform competition weights; larger means sharper source selection.
    """
    gaps = []
    for batch in batches:
        capture = []
        apply(ckpt.params, ckpt.config, batch.inputs, mask=batch.padding, capture=capture)
        for stats in capture:
            if stats is None:
                continue
            w = stats.competition_weights().astype(np.float64)      # (B, m, h)
            m = w.shape[-2]
            entropy = -(w * np.log(np.maximum(w, 1e-300))).sum(axis=-2)
            gaps.append(np.log(m) - entropy)
    return float(np.mean(gaps))


def model_for_task(task, **overrides):
    """A ModelConfig sized for ``task``; keyword overrides win."""
    kwargs = {**task.model_defaults(), **overrides}
    return ModelConfig(**kwargs)
