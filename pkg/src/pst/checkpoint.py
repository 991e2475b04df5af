"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes  b"PSTCKPT\\x00"
    version u32
    meta    u32 length + UTF-8 JSON (ints and strings only)
    count   u32
    count x [u16 name length, name, u32 rows, u32 cols, rows*cols float64 LE]

Doubles are stored raw, so ``load(save(x))`` is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PSTCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    meta: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<I", self.version)]
        meta = json.dumps(self.meta, sort_keys=True).encode()
        out += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(self.arrays))]
        for name in sorted(self.arrays):
            a = np.asarray(self.arrays[name], dtype=np.float64)
            if a.ndim != 2:
                raise CheckpointError(f"{name}: only 2-D arrays can be stored, got {a.shape}")
            raw = name.encode()
            out += [struct.pack("<H", len(raw)), raw, struct.pack("<II", *a.shape),
                    a.astype("<f8").tobytes(order="C")]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise CheckpointError("not a PST checkpoint (bad magic header)")
        pos = 8

        def read(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(buf):
                raise CheckpointError("truncated checkpoint")
            vals = struct.unpack_from(fmt, buf, pos)
            pos += size
            return vals

        (version,) = read("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        (meta_len,) = read("<I")
        meta = json.loads(buf[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = read("<I")
        arrays = {}
        for _ in range(count):
            (name_len,) = read("<H")
            name = buf[pos:pos + name_len].decode()
            pos += name_len
            rows, cols = read("<II")
            nbytes = rows * cols * 8
            if pos + nbytes > len(buf):
                raise CheckpointError(f"truncated data for {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols,
                                         offset=pos).astype(np.float64).reshape(rows, cols)
            pos += nbytes
        if pos != len(buf):
            raise CheckpointError(f"{len(buf) - pos} trailing bytes after checkpoint data")
        return cls(meta=meta, arrays=arrays, version=version)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
