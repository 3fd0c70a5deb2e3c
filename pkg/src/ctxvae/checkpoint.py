"""Binary checkpoint manifest: named float32 arrays plus a JSON header.

Layout: magic ``HVCK``, u32 little-endian header length, UTF-8 JSON header,
then the concatenated array payload.  Values are stored as little-endian
float32 in manifest order; loading validates every name and shape.
"""

from __future__ import annotations

import json

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"HVCK"


def save_checkpoint(path, arrays, meta):
    """Write named arrays (dict name -> ndarray) with a JSON metadata echo."""
    entries = []
    blobs = []
    offset = 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "entries": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read back (arrays, meta); raises on bad magic or truncated payload."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    hlen = int.from_bytes(blob[4:8], "little")
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    base = 8 + hlen
    arrays = {}
    for entry in header["entries"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise ValueError(f"{path}: truncated checkpoint payload for "
                             f"{entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header["meta"]
