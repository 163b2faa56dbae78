"""Versioned checkpoint file: JSON header + raw little-endian arrays.

Layout: magic b"BGSK", u32 version, u64 header length, UTF-8 JSON header,
then each array's bytes in header order. The header carries free-form
metadata plus an array table (name, dtype, shape, byte length). Not tied
to any framework's serialization; torch state dicts round-trip through
numpy.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"BGSK"
_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                    meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        # numpy dtype.str is explicit about endianness, e.g. "<f4"
        dtype = arr.dtype.newbyteorder("<").str
        blob = arr.astype(dtype, copy=False).tobytes()
        table.append({"name": name, "dtype": dtype,
                      "shape": list(arr.shape), "nbytes": len(blob)})
        blobs.append(blob)
    header = json.dumps({"meta": meta, "arrays": table},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != _VERSION:
            raise DataError(f"unsupported checkpoint version {version} in {path}")
        header = json.loads(fh.read(header_len).decode())
        arrays = {}
        for item in header["arrays"]:
            blob = fh.read(item["nbytes"])
            if len(blob) != item["nbytes"]:
                raise DataError(f"truncated checkpoint: {path}")
            arrays[item["name"]] = np.frombuffer(
                blob, dtype=item["dtype"]).reshape(item["shape"]).copy()
    return arrays, header["meta"]
