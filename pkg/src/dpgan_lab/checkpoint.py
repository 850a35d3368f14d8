"""Checkpoint files: a JSON manifest followed by one little-endian float32 payload.

Layout::

    DPGANCKPT1\\n
    <manifest byte length, decimal ASCII>\\n
    <manifest JSON, UTF-8>
    <payload>

Every tensor is listed in ``manifest["tensors"]`` with its shape and byte
offset into the payload. Integer buffers are stored as float32, which is
exact below 2**24 (token ids always are).
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"DPGANCKPT1\n"
_LE_F32 = np.dtype("<f4")


def save_checkpoint(path: str | Path, manifest: dict[str, Any], arrays: dict[str, np.ndarray]) -> Path:
    """Write atomically (temp file + rename) so an interrupted save never leaves a torn file."""
    path = Path(path)
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=_LE_F32)
        if np.issubdtype(np.asarray(arrays[name]).dtype, np.integer) and arr.size and \
                np.abs(np.asarray(arrays[name])).max() >= 2 ** 24:
            raise ContractError(f"integer buffer {name} is not exactly representable in float32")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    body = dict(manifest)
    body["tensors"] = index
    body["payload_bytes"] = offset
    header = json.dumps(body, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(header)}\n".encode("ascii"))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ContractError(f"cannot read checkpoint {path}: {exc}") from None
    if not blob.startswith(MAGIC):
        raise FormatError(f"{path} is not a checkpoint file")
    pos = len(MAGIC)
    nl = blob.index(b"\n", pos)
    size = int(blob[pos:nl])
    manifest = json.loads(blob[nl + 1:nl + 1 + size].decode("utf-8"))
    payload = memoryview(blob)[nl + 1 + size:]
    if len(payload) != manifest["payload_bytes"]:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    arrays = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=_LE_F32).reshape(entry["shape"]).astype(np.float32)
    return manifest, arrays
