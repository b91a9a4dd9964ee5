"""Binary parameter checkpoints.

Layout (all integers little-endian):
    magic "SFWT" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 extents[rank]
                | float32 values (row-major)
The byte layout is fixed so checkpoints reload identically across runs.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SFWT"
VERSION = 1


class FormatError(ValueError):
    """Malformed binary file; message carries the failing byte offset."""


def dump_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:32]}...")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(dump_checkpoint(tensors))


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic at byte 0: expected {MAGIC!r}, got {blob[:4]!r}")
    off = 4

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(
                f"truncated {what} at byte {off}: need {n} bytes, have {len(blob) - off}"
            )
        chunk = blob[off : off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * size, f"values of {name!r}"), dtype="<f4")
        tensors[name] = data.reshape(shape).copy()
    return tensors


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
