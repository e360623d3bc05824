"""Flat binary checkpoint container.

Layout: magic "VTKD", u32 format version, length-prefixed UTF-8 JSON config
block, then a sequence of named tensors (u32 name length, name, u32 rank,
u64 extents, float64 little-endian data). Round trips are bit exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"VTKD"
VERSION = 1


class CheckpointError(Exception):
    pass


class ConfigMismatchError(CheckpointError):
    """Checkpoint config is incompatible with the target model; the message
    names every differing field."""

    def __init__(self, fields: list[str]):
        super().__init__("checkpoint config mismatch: " + ", ".join(fields))
        self.fields = fields


def save(path, config: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in tensors:
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"'{path}' is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (json_len,) = struct.unpack_from("<I", raw, 8)
    off = 12
    config = json.loads(raw[off:off + json_len].decode("utf-8"))
    off += json_len

    tensors: dict[str, np.ndarray] = {}
    while off < len(raw):
        try:
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", raw, off)
            off += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
            off += 8 * count
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"truncated checkpoint '{path}': {exc}") from None
        if off > len(raw):
            raise CheckpointError(f"truncated checkpoint '{path}'")
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return config, tensors
