"""Tensor blob format shared by checkpoints, benchmarks and detection files.

A blob is a little-endian uint32 header length, a UTF-8 JSON header
``{"shape": [...], "dtype": "float32", "name": "..."}`` and the raw
little-endian row-major values. ``float32`` is the default; ``float64`` is
accepted so 64-bit runs round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

_ALLOWED = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1"}


def dumps(arr: np.ndarray, name: str = "") -> bytes:
    arr = np.asarray(arr)
    dtype = arr.dtype.name
    if dtype not in _ALLOWED:
        raise TypeError(f"unsupported blob dtype {dtype}")
    header = json.dumps({"shape": list(arr.shape), "dtype": dtype, "name": name}, sort_keys=True).encode()
    body = np.ascontiguousarray(arr, dtype=_ALLOWED[dtype]).tobytes()
    return struct.pack("<I", len(header)) + header + body


def _read_one(fh: BinaryIO) -> tuple[str, np.ndarray] | None:
    raw = fh.read(4)
    if not raw:
        return None
    if len(raw) < 4:
        raise ValueError("truncated blob header")
    (n,) = struct.unpack("<I", raw)
    header = json.loads(fh.read(n).decode())
    dt = np.dtype(_ALLOWED[header["dtype"]])
    count = int(np.prod(header["shape"], dtype=np.int64))
    body = fh.read(count * dt.itemsize)
    if len(body) != count * dt.itemsize:
        raise ValueError(f"truncated blob body for {header['name']!r}")
    arr = np.frombuffer(body, dtype=dt).astype(np.dtype(header["dtype"])).reshape(header["shape"])
    return header["name"], arr


def loads(data: bytes) -> tuple[str, np.ndarray]:
    import io

    item = _read_one(io.BytesIO(data))
    if item is None:
        raise ValueError("empty blob")
    return item


def iter_blobs(path: str | Path) -> Iterator[tuple[str, np.ndarray]]:
    with open(path, "rb") as fh:
        while (item := _read_one(fh)) is not None:
            yield item


def save(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            fh.write(dumps(arr, name))


def load(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, arr in iter_blobs(path):
        if name in out:
            raise ValueError(f"duplicate blob name {name!r} in {path}")
        out[name] = arr
    return out
