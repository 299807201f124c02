"""Versioned binary blobs: magic, version, JSON header, raw array payload.

The header lists every array (name, dtype, shape, byte offset), so a blob
is byte-identical whenever its contents are.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import nn

CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> str:
    layout, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        layout.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    digest = nn.weights_hash(arrays)
    head = json.dumps({**header, "arrays": layout, "weights_sha256": digest}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)
    return digest


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    body = memoryview(data)[12 + hlen:]
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        a = np.frombuffer(body, dtype=dt, count=count, offset=spec["offset"])
        arrays[spec["name"]] = a.reshape(spec["shape"]).copy()
    if nn.weights_hash(arrays) != header["weights_sha256"]:
        raise ValueError(f"checkpoint {path} failed its weight hash check")
    return header, arrays
