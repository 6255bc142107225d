"""Versioned binary records for matrices, codebooks and models.

Layout (little-endian)::

    magic    8 bytes  b"FLGPRREC"
    version  u32      RECORD_VERSION
    hlen     u32      length of the JSON header
    header   hlen     UTF-8 JSON: {"kind": str, "meta": {...},
                                   "arrays": [{"name", "dtype", "shape"}, ...]}
    payload           each array's raw bytes, in header order, C order

Headers are written with sorted keys so identical inputs give identical
bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .dataset import LaneFormatError, TruncatedFileError

RECORD_MAGIC = b"FLGPRREC"
RECORD_VERSION = 1

_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "c16": "<c16", "c8": "<c8", "b1": "|b1"}


def _code(dtype):
    dt = np.dtype(dtype)
    for code, spec in _DTYPES.items():
        if np.dtype(spec) == dt.newbyteorder("<") or np.dtype(spec) == dt:
            return code
    raise TypeError(f"unsupported record dtype {dt}")


def write_record(path, kind, meta=None, arrays=None):
    arrays = arrays or {}
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr.dtype)
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries},
                        sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(RECORD_MAGIC)
        fh.write(struct.pack("<II", RECORD_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_record(path, expect_kind=None):
    """Return ``(kind, meta, arrays)``."""
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != RECORD_MAGIC:
        raise LaneFormatError(f"{path}: not a record file (bad magic)")
    if len(data) < 16:
        raise TruncatedFileError(f"{path}: truncated record header")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != RECORD_VERSION:
        raise LaneFormatError(f"{path}: unsupported record version {version}")
    if len(data) < 16 + hlen:
        raise TruncatedFileError(f"{path}: truncated record header")
    header = json.loads(data[16:16 + hlen])
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise LaneFormatError(f"{path}: expected a {expect_kind!r} record, found {kind!r}")
    pos = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if pos + n > len(data):
            raise TruncatedFileError(f"{path}: truncated payload for array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(data[pos:pos + n], dtype=dt).reshape(e["shape"]).copy()
        pos += n
    return kind, header["meta"], arrays


def write_matrix(path, matrix, meta=None):
    """Feature matrix record: rows are alarms; ``meta`` names the kind and dim."""
    matrix = np.asarray(matrix)
    meta = dict(meta or {})
    meta.setdefault("rows", int(matrix.shape[0]))
    if matrix.ndim == 2:
        meta.setdefault("dim", int(matrix.shape[1]))
    write_record(path, "matrix", meta, {"values": matrix})


def read_matrix(path):
    _, meta, arrays = read_record(path, "matrix")
    return arrays["values"], meta
