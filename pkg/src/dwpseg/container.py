"""Named-array container used by checkpoints, kernel banks and prior bundles.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic (4 ASCII bytes, e.g. b"DWPC")
    4       2     format version, uint16
    6       4     header length H in bytes, uint32
    10      H     UTF-8 JSON header
    10+H    ...   raw array payloads, concatenated in header order

The JSON header has two keys: ``meta`` (free-form record) and ``arrays``, a
list of ``{"name", "dtype", "shape", "offset", "nbytes"}`` entries. Offsets
are relative to the start of the payload section. Dtypes are numpy
little-endian strings (``"<f4"``, ``"<f8"``, ``"|u1"``...).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from dwpseg.errors import FormatError, VersionError

_PREFIX = struct.Struct("<4sHI")


def write_container(path, magic: bytes, version: int, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def read_container(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container; returns ``(meta, arrays)``.

    Raises VersionError on a wrong magic/version and FormatError on any
    truncation or malformed header.
    """
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError(f"{path}: file too short for a container prefix")
    got_magic, got_version, hlen = _PREFIX.unpack_from(data, 0)
    if got_magic != magic:
        raise VersionError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise VersionError(f"{path}: format version {got_version}, this code reads {version}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise FormatError(f"{path}: header truncated")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
        entries = header["arrays"]
        meta = header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    body = memoryview(data)[start + hlen :]
    arrays = {}
    for e in entries:
        try:
            dtype = np.dtype(e["dtype"])
            shape = tuple(int(s) for s in e["shape"])
            lo, n = int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed array entry {e!r}") from exc
        if lo < 0 or lo + n > len(body):
            raise FormatError(f"{path}: payload for {e.get('name')!r} truncated")
        if n != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: size mismatch for {e.get('name')!r}")
        arrays[e["name"]] = np.frombuffer(body[lo : lo + n], dtype=dtype).reshape(shape).copy()
    return meta, arrays
