"""Writer for the pose pipeline's tensor archive format.

Byte layout (little-endian): magic "ZS6D", version u16 = 1, dtype u8
(0 float32, 1 uint16), reserved u8 = 0, rows/cols/dim u32, row-major
payload, then an optional u32-length-prefixed JSON metadata block. The
format is the contract between this exporter and the pose pipeline; its
reference reader lives in the pipeline package and validates every file
the tests emit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ZS6D"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIII")
_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint16): 1}


def write_tensor(path, array: np.ndarray, metadata: dict | None = None) -> None:
    arr = np.ascontiguousarray(array)
    if arr.ndim != 3:
        raise ValueError(f"tensor must be 3-dimensional, got {arr.shape}")
    code = _CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    rows, cols, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, code, 0, rows, cols, dim))
        fh.write(arr.tobytes())
        if metadata is not None:
            blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
