"""DTF: the raw tensor container used for weights, samples and fixtures.

Layout of one record::

    b"DABDUTF1"                      8-byte magic
    uint32 little-endian             header length in bytes
    UTF-8 JSON header                {"shape": [...], "dtype": "f64"}
    float64 little-endian payload    row-major, prod(shape) values

A single-tensor file holds one record.  Multi-tensor files (weights) hold a
leading record whose header also carries ``"name"``; records are simply
concatenated.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DABDUTF1"
_LEN = struct.Struct("<I")


class DTFError(ValueError):
    """Malformed or truncated DTF data; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _encode(array: np.ndarray, name: str | None = None) -> bytes:
    arr = np.asarray(array, dtype="<f8")
    header = {"shape": list(arr.shape), "dtype": "f64"}
    if name is not None:
        header["name"] = name
    raw = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return MAGIC + _LEN.pack(len(raw)) + raw + arr.tobytes(order="C")


def _decode(buf: bytes, offset: int) -> tuple[dict, np.ndarray, int]:
    if buf[offset:offset + 8] != MAGIC:
        raise DTFError("bad magic, expected DABDUTF1", offset)
    offset += 8
    if len(buf) < offset + 4:
        raise DTFError("truncated header length", offset)
    (hlen,) = _LEN.unpack_from(buf, offset)
    offset += 4
    if len(buf) < offset + hlen:
        raise DTFError("truncated JSON header", offset)
    try:
        header = json.loads(buf[offset:offset + hlen].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError):
        raise DTFError("unparseable JSON header", offset) from None
    if header.get("dtype") != "f64":
        raise DTFError(f"unsupported dtype {header.get('dtype')!r}", offset)
    if any(s < 0 for s in shape):
        raise DTFError("negative extent in shape", offset)
    offset += hlen
    nbytes = 8 * int(np.prod(shape, dtype=np.int64))
    if len(buf) < offset + nbytes:
        raise DTFError(
            f"truncated payload: need {nbytes} bytes, have {len(buf) - offset}", len(buf)
        )
    data = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
    return header, data.astype(np.float64), offset + nbytes


def dumps(array: np.ndarray) -> bytes:
    return _encode(np.asarray(array))


def loads(buf: bytes) -> np.ndarray:
    _, data, end = _decode(buf, 0)
    if end != len(buf):
        raise DTFError("trailing bytes after tensor", end)
    return data


def write(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(dumps(array))


def read(path: str | Path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def write_many(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named arrays in iteration order to a single file."""
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            fh.write(_encode(np.asarray(arr), name=name))


def read_many(path: str | Path) -> dict[str, np.ndarray]:
    """Parse every record of a multi-tensor file; all-or-nothing."""
    buf = Path(path).read_bytes()
    out: dict[str, np.ndarray] = {}
    offset = 0
    while offset < len(buf):
        header, data, nxt = _decode(buf, offset)
        name = header.get("name")
        if not isinstance(name, str):
            raise DTFError("record without a name in multi-tensor file", offset)
        if name in out:
            raise DTFError(f"duplicate record {name!r}", offset)
        out[name] = data
        offset = nxt
    return out
