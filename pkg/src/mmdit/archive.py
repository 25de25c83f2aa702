"""Binary archive for named float64 arrays plus JSON side entries.

Layout:
  bytes 0..3    magic ``MMT1``
  bytes 4..11   u64 little-endian header length ``L``
  bytes 12..    UTF-8 JSON header, ``L`` bytes:
                {name: {"shape": [...], "dtype": "f64"|"json", "byte_offset": int}}
  payload       starts at the first 8-byte boundary after the header;
                ``byte_offset`` is relative to the payload start and every
                entry is 8-byte aligned. "f64" payloads are raw little-endian
                float64; "json" payloads are UTF-8 text whose byte length is
                ``shape == [nbytes]``.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractError

MAGIC = b"MMT1"


def _align8(n):
    return (n + 7) & ~7


def save_archive(path, arrays, json_entries=None):
    """Write named float64 arrays (and optional JSON strings) to ``path``."""
    entries = {}
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = arr.astype("<f8").tobytes()  # C order regardless of memory layout
        entries[name] = {"shape": list(arr.shape), "dtype": "f64", "byte_offset": offset}
        blobs.append(raw)
        offset = _align8(offset + len(raw))
    for name, obj in (json_entries or {}).items():
        if name in entries:
            raise ContractError(f"duplicate archive entry {name!r}")
        raw = json.dumps(obj, sort_keys=True).encode("utf-8")
        entries[name] = {"shape": [len(raw)], "dtype": "json", "byte_offset": offset}
        blobs.append(raw)
        offset = _align8(offset + len(raw))

    header = json.dumps(entries, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        pos = 12 + len(header)
        f.write(b"\x00" * (_align8(pos) - pos))
        written = 0
        for raw in blobs:
            f.write(raw)
            written += len(raw)
            pad = _align8(written) - written
            f.write(b"\x00" * pad)
            written += pad


def load_archive(path):
    """Read an archive; returns (arrays: dict[str, ndarray], json_entries: dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ContractError(f"{path}: bad magic {blob[:4]!r}")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    base = _align8(12 + hlen)
    arrays = {}
    json_entries = {}
    for name, meta in header.items():
        start = base + meta["byte_offset"]
        if meta["dtype"] == "f64":
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
            arrays[name] = arr.reshape(meta["shape"]).astype(np.float64).copy()
        elif meta["dtype"] == "json":
            nbytes = meta["shape"][0]
            json_entries[name] = json.loads(blob[start : start + nbytes].decode("utf-8"))
        else:
            raise ContractError(f"{path}: unknown dtype {meta['dtype']!r} for {name!r}")
    return arrays, json_entries
