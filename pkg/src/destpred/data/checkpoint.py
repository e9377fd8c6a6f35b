"""Binary checkpoint container.

Layout, all little-endian:

    bytes 0..7    magic b"DESTCKPT"
    bytes 8..11   uint32 format version
    bytes 12..19  uint64 header length in bytes
    header        UTF-8 JSON: model_kind, config, extra,
                  params: [{"name": str, "shape": [int, ...]}, ...]
    payload       float32 arrays concatenated in header order

The JSON header makes checkpoints inspectable with a hex dump and two lines
of Python; the raw float32 payload round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DESTCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_kind: str
    config: dict
    params: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f4").tobytes())
    header = json.dumps(
        {
            "model_kind": ckpt.model_kind,
            "config": ckpt.config,
            "extra": ckpt.extra,
            "params": entries,
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    offset = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    if offset + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    offset += header_len
    params: dict[str, np.ndarray] = {}
    for entry in header.get("params", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[entry["name"]] = arr.astype(np.float32, copy=True)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(
        model_kind=str(header.get("model_kind", "")),
        config=header.get("config", {}),
        params=params,
        extra=header.get("extra", {}),
    )
