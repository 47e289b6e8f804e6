"""Tagged binary container shared by model (KNO1), dataset (KDS1) and state files.

Layout, all integers little-endian:

    offset 0   4 bytes   magic, ASCII (e.g. b"KNO1")
    offset 4   u32       format version
    offset 8   u32       descriptor length D in bytes
    offset 12  D bytes   UTF-8 JSON descriptor
    offset 12+D          arrays, float64 little-endian, C order, in the order
                         listed by descriptor["arrays"] (each entry has a
                         name and a shape)

Nothing follows the last array, so the file size is exactly
12 + D + 8 * (total element count).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

HEADER = struct.Struct("<4sII")
VERSION = 1


def encode(magic: bytes, descriptor: dict, arrays: dict[str, np.ndarray],
           version: int = VERSION) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    desc = dict(descriptor)
    desc["arrays"] = [
        {"name": name, "shape": list(np.shape(a))} for name, a in arrays.items()
    ]
    blob = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [HEADER.pack(magic, version, len(blob)), blob]
    for a in arrays.values():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def write(path, magic: bytes, descriptor: dict, arrays: dict[str, np.ndarray],
          version: int = VERSION) -> int:
    """Write atomically (temp file + rename); returns the byte count."""
    data = encode(magic, descriptor, arrays, version)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return len(data)


def decode(data: bytes, magic: bytes, version: int = VERSION) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < HEADER.size:
        raise FormatError("file shorter than the container header", offset=len(data))
    got_magic, got_version, dlen = HEADER.unpack_from(data, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}", offset=0)
    if got_version != version:
        raise FormatError(f"unsupported version {got_version}", offset=4)
    start = HEADER.size
    if start + dlen > len(data):
        raise FormatError("descriptor runs past end of file", offset=len(data))
    try:
        desc = json.loads(data[start:start + dlen].decode("utf-8"))
        specs = [(a["name"], tuple(int(s) for s in a["shape"])) for a in desc["arrays"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable descriptor ({exc})", offset=start) from None
    pos = start + dlen
    arrays = {}
    for name, shape in specs:
        if any(s < 0 for s in shape):
            raise FormatError(f"negative shape for array {name!r}", offset=start)
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"array {name!r} truncated", offset=len(data))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos) \
            .astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last array", offset=pos)
    return desc, arrays


def read(path, magic: bytes, version: int = VERSION) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic, version)


def read_descriptor(path) -> dict:
    """Header and descriptor only, whatever the magic (used by `dataset-info`)."""
    with Path(path).open("rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise FormatError("file shorter than the container header", offset=len(head))
        magic, version, dlen = HEADER.unpack(head)
        blob = fh.read(dlen)
    if len(blob) != dlen:
        raise FormatError("descriptor runs past end of file", offset=HEADER.size + len(blob))
    try:
        desc = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"unreadable descriptor ({exc})", offset=HEADER.size) from None
    desc["magic"] = magic.decode("ascii", "replace")
    desc["version"] = version
    return desc
