"""Checkpoint files.

Layout::

    b"FLOWCKPT1\\n"                 magic, 10 bytes
    <u8 little-endian>             header length in bytes
    header                         UTF-8 JSON: config, tensors, training state
    payload                        raw little-endian tensor data

Each tensor entry in the header records name, shape, dtype and the byte
offset of its data relative to the start of the payload.
"""

import json
import struct

import numpy as np

from .errors import DataError
from .model import Checkpoint, ModelConfig, validate_params

MAGIC = b"FLOWCKPT1\n"
_STATE_PREFIX = {"m": "state.m/", "v": "state.v/"}


def save_checkpoint(path, ckpt):
    tensors = dict(ckpt.params)
    state = None
    if ckpt.training_state is not None:
        state = {"step": int(ckpt.training_state["step"])}
        for key, prefix in _STATE_PREFIX.items():
            for name, arr in ckpt.training_state[key].items():
                tensors[prefix + name] = arr
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"config": ckpt.config.to_dict(), "tensors": entries,
                         "training_state": state}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: not a FLOWCKPT1 checkpoint")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    try:
        header = json.loads(blob[pos:pos + hlen])
    except ValueError as exc:
        raise DataError(f"{path}: corrupt header") from exc
    payload = memoryview(blob)[pos + hlen:]
    tensors = {}
    for e in header["tensors"]:
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise DataError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.dtype(e["dtype"]), copy=True)
    config = ModelConfig.from_dict(header["config"])
    params = {k: v for k, v in tensors.items() if not k.startswith("state.")}
    validate_params(config, params)
    state = None
    if header.get("training_state") is not None:
        state = {"step": header["training_state"]["step"]}
        for key, prefix in _STATE_PREFIX.items():
            state[key] = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    return Checkpoint(config, params, state)
