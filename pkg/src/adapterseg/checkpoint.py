"""Named-tensor checkpoint archive.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
raw little-endian row-major float32 payloads.  The header maps each
parameter name to {dtype, shape, offset} (offset relative to the start
of the payload region) and records the model configuration, the adapter
plan, and optional run metadata.  Serialization is canonical (sorted
keys) so identical states produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_NAME = "adapterseg-checkpoint-v1"


def save_checkpoint(path, state, model_cfg, plan=None, extra=None):
    """Write name->array state with its configs; returns the path."""
    tensors = {}
    offset = 0
    payloads = []
    for name, arr in state.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        tensors[name] = {"dtype": "float32", "shape": list(arr.shape), "offset": offset}
        payloads.append(arr32.tobytes())
        offset += arr32.nbytes
    header = {
        "format": FORMAT_NAME,
        "model": model_cfg.to_dict(),
        "adapter": plan.to_dict() if plan is not None else None,
        "extra": extra or {},
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payloads:
            fh.write(chunk)
    return path


def load_checkpoint(path):
    """Read (header, name->float32 array) back from disk."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataError(f"checkpoint too short: {path}")
    (hlen,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint header unreadable: {exc}") from None
    if header.get("format") != FORMAT_NAME:
        raise DataError(f"unexpected checkpoint format: {header.get('format')!r}")
    payload = raw[8 + hlen :]
    state = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        state[name] = arr.reshape(shape).copy()
    return header, state


def restore_into(model, state, strict=True):
    """Load arrays into a model's parameters by name, casting to its dtype."""
    params = {p.name: p for p in model.parameters()}
    missing = set(params) - set(state)
    unexpected = set(state) - set(params)
    if strict and (missing or unexpected):
        raise DataError(
            f"checkpoint/model mismatch: missing={sorted(missing)[:5]} "
            f"unexpected={sorted(unexpected)[:5]}"
        )
    for name, arr in state.items():
        if name not in params:
            continue
        p = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise DataError(
                f"checkpoint tensor {name} has shape {arr.shape}, expected {p.data.shape}"
            )
        p.tensor.data = arr.astype(p.data.dtype)
