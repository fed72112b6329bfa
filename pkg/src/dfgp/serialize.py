"""Model files: a JSON header followed by raw little-endian array blobs.

Layout::

    b"DFGM" 0x01 | u32 header_len | header (UTF-8 JSON) | blobs

``header["arrays"]`` lists ``{"name", "dtype", "shape"}`` in blob order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DFGM"
PREFIX = struct.Struct("<4sBI")


def save_model(path, header: dict, arrays: dict[str, np.ndarray], dtype: str = "<f8") -> None:
    header = dict(header)
    header["arrays"] = [{"name": k, "dtype": dtype, "shape": list(np.shape(v))} for k, v in arrays.items()]
    text = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PREFIX.pack(MAGIC, 1, len(text)))
        fh.write(text)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=dtype).tobytes())


def load_model(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < PREFIX.size:
        raise FormatError(f"{path}: truncated model file")
    magic, version, n = PREFIX.unpack_from(data)
    if magic != MAGIC or version != 1:
        raise FormatError(f"{path}: not a model file")
    try:
        header = json.loads(data[PREFIX.size:PREFIX.size + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    offset = PREFIX.size + n
    arrays = {}
    for spec in header.get("arrays", []):
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + count * dt.itemsize
        if end > len(data):
            raise FormatError(f"{path}: truncated blob {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(spec["shape"]).copy()
        offset = end
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return header, arrays
