"""Binary checkpoint container.

Layout (little-endian)::

    b"SCKP" | u32 version | u32 config length | config (utf-8 JSON)
    u32 array count
    per array: u32 name length | name (utf-8) | u8 dtype tag | u32 rank | u32 dims... | raw data

Model parameters are stored under their module names, EMA copies under
``ema/``, optimizer moments under ``adam_m/`` and ``adam_v/``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SCKP"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
    4: np.dtype("<i4"),
}
_TAGS = {v: k for k, v in _DTYPES.items()}


class CheckpointError(IOError):
    pass


def encode(config: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    cfg = json.dumps(dict(config), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, order="C")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _TAGS:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BI", _TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(dt, copy=False).tobytes())
    return b"".join(parts)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        return _decode(data)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def _decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    config = json.loads(data[off : off + cfg_len])
    off += cfg_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode()
        off += n
        tag, rank = struct.unpack_from("<BI", data, off)
        off += 5
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        dt = _DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + size > len(data):
            raise CheckpointError(f"array {name!r} truncated")
        arrays[name] = np.frombuffer(data[off : off + size], dtype=dt).reshape(shape).copy()
        off += size
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes")
    return config, arrays


def save(path: str | Path, config: Mapping, arrays: Mapping[str, np.ndarray]) -> Path:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode(config, arrays)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".sckp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
