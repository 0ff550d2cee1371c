"""Binary container for checkpoints and recorded trajectories.

Layout: an 8-byte magic+version, a little-endian uint64 header length, a JSON
header (named metadata fields plus the payload array table), then the arrays
concatenated as little-endian float64. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FRLC\x00\x00\x00\x01"


class ContainerError(RuntimeError):
    """Corrupt or incompatible container file."""


def save_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write metadata and named float64 arrays to `path`."""
    table = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        table.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = dict(meta)
    header["arrays"] = table
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for p in payloads:
            f.write(p)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (metadata, arrays); inverse of save_container."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path} is not a container file")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    table = header.pop("arrays")
    arrays = {}
    offset = 16 + header_len
    for entry in table:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        buf = raw[offset:offset + nbytes]
        if len(buf) != nbytes:
            raise ContainerError(f"truncated payload for {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    return header, arrays
