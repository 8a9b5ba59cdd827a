"""Versioned binary checkpoints for named parameter tensors.

Layout (all integers little-endian):

    bytes 0..3    magic ``FSCK``
    bytes 4..7    format version (uint32, currently 1)
    bytes 8..15   header length H (uint64)
    bytes 16..16+H  UTF-8 JSON header:
                    {"meta": {...}, "tensors": [{"name", "shape"}, ...]}
    then          raw float64 little-endian buffers, one per tensor,
                  in the header's order (names sorted lexicographically)

Everything is deterministic for given contents, so identical parameters and
metadata produce byte-identical files; load(save(x)) reproduces every array
bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"FSCK"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a valid checkpoint of a supported version."""


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict) -> None:
    names = sorted(params)
    header = {
        "meta": meta,
        "tensors": [{"name": n, "shape": list(np.asarray(params[n]).shape)}
                    for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            arr = np.ascontiguousarray(np.asarray(params[n], dtype=np.float64))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    params: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise CheckpointError(
                f"checkpoint truncated reading tensor {spec['name']!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        params[spec["name"]] = arr.reshape(shape).astype(np.float64).copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"checkpoint has {len(data) - offset} trailing bytes")
    return params, header["meta"]
