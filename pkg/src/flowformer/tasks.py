"""Synthetic sequence tasks and a byte-level text pipeline.

All generators are pure functions of their seed and parameters. Seeds may be
an int or a sequence of ints (fed to :func:`numpy.random.default_rng`), so
training code can derive per-step streams as ``(seed, step)``.
"""

import json
import statistics
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError

PAD = 0
SEP = 1


@dataclass
class TaskBatch:
    inputs: np.ndarray          # (batch, n) int64
    targets: np.ndarray         # (batch, n) for sequence tasks, (batch,) for classification
    loss_mask: np.ndarray       # same shape as targets, 0/1
    causal: bool
    padding: np.ndarray = None  # (batch, n) 1 = real token; None when nothing is padded

    def __len__(self):
        return len(self.inputs)

    def to_jsonl(self, path):
        """One JSON object per sample: input ids, target(s), loss mask."""
        with open(path, "w") as fh:
            for i in range(len(self)):
                fh.write(json.dumps({
                    "input": self.inputs[i].tolist(),
                    "target": self.targets[i].tolist(),
                    "mask": self.loss_mask[i].tolist(),
                }) + "\n")


def read_jsonl(path, causal):
    rows = [json.loads(line) for line in open(path)]
    return TaskBatch(np.array([r["input"] for r in rows]), np.array([r["target"] for r in rows]),
                     np.array([r["mask"] for r in rows]), causal)


# -- copy ----------------------------------------------------------------------

def gen_copy_task(seed, batch, seq_len, vocab):
    """``[x_1..x_k, SEP, PAD * k]`` with the run ``x`` as target on the last k positions.

    ``seq_len = 2k + 1``. Content tokens are drawn from ``[2, vocab)``.
    """
    if vocab < 4:
        raise ContractError("copy task needs vocab >= 4 (pad and separator are reserved)")
    if seq_len < 3 or seq_len % 2 == 0:
        raise ContractError(f"copy task needs an odd seq_len >= 3, got {seq_len}")
    k = (seq_len - 1) // 2
    run = np.random.default_rng(seed).integers(2, vocab, size=(batch, k))
    inputs = np.zeros((batch, seq_len), dtype=np.int64)
    inputs[:, :k] = run
    inputs[:, k] = SEP
    targets = np.zeros_like(inputs)
    targets[:, k + 1:] = run
    mask = np.zeros_like(inputs)
    mask[:, k + 1:] = 1
    return TaskBatch(inputs, targets, mask, causal=True)


# -- ListOps-mini ----------------------------------------------------------------

OPERATORS = ("MIN", "MAX", "MED", "SM")
LISTOPS_TOKENS = ("<pad>", *(str(i) for i in range(10)), *(f"[{op}" for op in OPERATORS), "]")
LISTOPS_IDS = {tok: i for i, tok in enumerate(LISTOPS_TOKENS)}
LISTOPS_VOCAB = len(LISTOPS_TOKENS)


def apply_operator(op, args):
    if op == "MIN":
        return min(args)
    if op == "MAX":
        return max(args)
    if op == "MED":
        return statistics.median_low(args)
    if op == "SM":
        return sum(args) % 10
    raise DataError(f"unknown operator {op!r}")


def _gen_tree(rng, depth, max_depth, max_args):
    """Random expression as nested lists ``[op, arg, ...]``; returns (tree, value)."""
    op = OPERATORS[rng.integers(len(OPERATORS))]
    nargs = int(rng.integers(2, max_args + 1))
    tree, values = [op], []
    for _ in range(nargs):
        if depth < max_depth and rng.random() < 0.3:
            sub, val = _gen_tree(rng, depth + 1, max_depth, max_args)
        else:
            val = int(rng.integers(10))
            sub = val
        tree.append(sub)
        values.append(val)
    return tree, apply_operator(op, values)


def listops_tokens(tree):
    """Flatten a tree into token strings: ``[MAX 1 [MIN 2 3 ] ]``."""
    if isinstance(tree, int):
        return [str(tree)]
    out = [f"[{tree[0]}"]
    for arg in tree[1:]:
        out.extend(listops_tokens(arg))
    out.append("]")
    return out


def encode_listops(text):
    """Token ids for an expression written like ``"[MAX 1 2 3]"``."""
    text = text.replace("]", " ] ").replace("(", " ").replace(")", " ")
    try:
        return [LISTOPS_IDS[tok] for tok in text.split()]
    except KeyError as exc:
        raise DataError(f"unknown ListOps token {exc.args[0]!r}") from None


def gen_listops_mini(seed, batch, max_depth=3, max_len=128, max_args=5):
    """Nested MIN/MAX/MED/SM expressions over digits, labelled with their value.

    Expressions longer than ``max_len`` tokens are redrawn; the batch is
    right-padded to its longest member.
    """
    if max_len > 512:
        raise ContractError("ListOps-mini supports max_len <= 512")
    if max_len < 2 + max_args:
        raise ContractError(f"max_len {max_len} too short for {max_args}-argument expressions")
    rng = np.random.default_rng(seed)
    seqs, labels = [], []
    while len(seqs) < batch:
        tree, val = _gen_tree(rng, 1, max_depth, max_args)
        toks = listops_tokens(tree)
        if len(toks) > max_len:
            continue
        seqs.append([LISTOPS_IDS[t] for t in toks])
        labels.append(val)
    n = max(len(s) for s in seqs)
    inputs = np.zeros((batch, n), dtype=np.int64)
    padding = np.zeros((batch, n), dtype=np.int64)
    for i, s in enumerate(seqs):
        inputs[i, :len(s)] = s
        padding[i, :len(s)] = 1
    targets = np.array(labels, dtype=np.int64)
    return TaskBatch(inputs, targets, np.ones_like(targets), causal=False, padding=padding)


def decode_listops(ids):
    return " ".join(LISTOPS_TOKENS[i] for i in ids if i != PAD)


# -- character LM ------------------------------------------------------------------

class ByteVocab:
    """Byte-level vocabulary built from a corpus; id 0 is padding."""

    def __init__(self, data):
        self.symbols = sorted(set(data))
        self.ids = {b: i + 1 for i, b in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols) + 1

    def encode(self, text):
        data = text.encode("utf-8") if isinstance(text, str) else text
        return np.array([self.ids[b] for b in data], dtype=np.int64)

    def decode(self, ids):
        return bytes(self.symbols[i - 1] for i in ids if i != PAD).decode("utf-8")


@dataclass
class WindowStream:
    """Contiguous, non-overlapping windows with next-token targets."""

    inputs: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    def __len__(self):
        return len(self.inputs)

    def batch(self, rng, size):
        idx = rng.integers(len(self), size=size)
        return TaskBatch(self.inputs[idx], self.targets[idx], self.loss_mask[idx], causal=True)

    def batches(self, size):
        for start in range(0, len(self), size):
            sl = slice(start, start + size)
            yield TaskBatch(self.inputs[sl], self.targets[sl], self.loss_mask[sl], causal=True)


def _windows(ids, seq_len):
    count = len(ids) // seq_len
    inputs = ids[:count * seq_len].reshape(count, seq_len)
    targets = np.zeros_like(inputs)
    mask = np.zeros_like(inputs)
    nxt = ids[1:count * seq_len + 1]
    targets.reshape(-1)[:len(nxt)] = nxt
    mask.reshape(-1)[:len(nxt)] = 1
    return WindowStream(inputs, targets, mask)


def load_char_lm(path, seq_len, split_fraction=0.9):
    """Split a UTF-8 file into train/eval window streams by prefix.

    Returns ``(train, eval, vocab)``. The train split holds
    ``floor(len * split_fraction / seq_len)`` windows.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not valid UTF-8") from exc
    need = 10 * seq_len
    if len(data) < need:
        raise DataError(f"corpus has {len(data)} characters; at least {need} required")
    vocab = ByteVocab(data)
    ids = vocab.encode(data)
    cut = int(len(ids) * split_fraction)
    return _windows(ids[:cut], seq_len), _windows(ids[cut:], seq_len), vocab
