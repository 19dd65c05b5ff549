"""Checkpoint container: a text header plus raw little-endian float32 payload.

The header is a single JSON line carrying the format version and the key
manifest (name, shape, dtype); the payload is the concatenation of each key's
values in manifest order. Server and client checkpoints share the format; the
key namespace tells backbone, shared topology, private topology, batch-norm
state, and classifier apart.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import Params
from .tensor import Tensor

_MAGIC = "fedskel-ckpt"
_VERSION = 1


def save_checkpoint(path: Path, params: Params) -> None:
    manifest = [
        {"name": k, "shape": list(p.data.shape), "dtype": "float32"}
        for k, p in params.items()
    ]
    header = {"format": _MAGIC, "version": _VERSION, "keys": manifest}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for k, p in params.items():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: Path, requires_grad: bool = False) -> Params:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
        if header.get("format") != _MAGIC or header.get("version") != _VERSION:
            raise CheckpointError(f"unrecognized checkpoint format in {path}")
        params: Params = {}
        for entry in header["keys"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError(f"truncated checkpoint payload in {path}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
            params[entry["name"]] = Tensor(arr, requires_grad=requires_grad)
    return params


def checkpoint_keys(path: Path) -> list[str]:
    """Key manifest without loading the payload."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
    if header.get("format") != _MAGIC:
        raise CheckpointError(f"unrecognized checkpoint format in {path}")
    return [entry["name"] for entry in header["keys"]]
