"""Binary checkpoint container.

Layout (little-endian)::

    b"PDGM"  u32 version
    u32 entry count
    per entry: u16 name length, utf-8 name, u32 rank, u64 dims..., u64 payload offset
    raw f64 payloads, offsets relative to the start of the payload section
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PDGM"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    header = bytearray(MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(tensors)))
    offset = 0
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw
        header += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        header += struct.pack("<Q", offset)
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for p in payloads:
            fh.write(p)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    entries = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        (off,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        entries.append((name, shape, off))
    out = {}
    for name, shape, off in entries:
        size = int(np.prod(shape)) if shape else 1
        start = pos + off
        if start + 8 * size > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=start).reshape(shape).copy()
    return out
