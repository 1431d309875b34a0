"""CTMX binary tensor format and the named-tensor checkpoint container.

A tensor record is::

    b"CTMX" | version: u16 | rank: u8 | dims: rank x u32 | data: prod(dims) x f32

all little-endian. A checkpoint (``.ctmx`` file holding several tensors) is::

    b"CTMK" | version: u16 | manifest_len: u32 | manifest (UTF-8 JSON)
    | count: u32 | count x (name_len: u16 | name (UTF-8) | tensor record)
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import UsageError

MAGIC = b"CTMX"
PACK_MAGIC = b"CTMK"
VERSION = 1


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise UsageError(f"rank {arr.ndim} exceeds the format limit of 255")
    fh.write(MAGIC)
    fh.write(struct.pack("<HB", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise UsageError(f"bad CTMX magic {magic!r}")
    version, rank = struct.unpack("<HB", fh.read(3))
    if version != VERSION:
        raise UsageError(f"unsupported CTMX version {version}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise UsageError("truncated CTMX tensor data")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, tensors[name])
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != PACK_MAGIC:
            raise UsageError(f"{path} is not a CTMX checkpoint")
        version, meta_len = struct.unpack("<HI", fh.read(6))
        if version != VERSION:
            raise UsageError(f"unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            tensors[name] = read_tensor(fh)
    return tensors, manifest
