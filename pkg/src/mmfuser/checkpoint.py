"""Binary checkpoint format.

Layout (all integers little-endian):
    magic "MMFZ" | version u32 | tensor count u32
    per tensor: name length u32 | name utf-8 | rank u32 | dims u32 each
                | dtype tag u8 (0 = f64, 1 = f32) | raw data, row-major LE

save -> load -> save is byte-identical: the per-tensor dtype tag survives the
round trip and f32 payloads upcast losslessly to the engine's f64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Param

MAGIC = b"MMFZ"
VERSION = 1
_DTYPE_TAGS = {"f64": 0, "f32": 1}
_TAG_DTYPES = {0: ("f64", "<f8"), 1: ("f32", "<f4")}

__all__ = ["Checkpoint", "CheckpointEntry", "CheckpointError", "save_params", "load_into_params"]


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointEntry:
    name: str
    data: np.ndarray  # float64 in memory regardless of stored dtype
    dtype: str  # "f64" | "f32"


@dataclass
class Checkpoint:
    entries: list[CheckpointEntry]

    @classmethod
    def from_params(cls, params: list[Param], dtype: str = "f64") -> "Checkpoint":
        if dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unknown checkpoint dtype {dtype!r}")
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise CheckpointError("duplicate parameter names")
        return cls(
            entries=[CheckpointEntry(p.name, np.array(p.value.data), dtype) for p in params]
        )

    def save(self, path: str | Path) -> None:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<I", VERSION)
        out += struct.pack("<I", len(self.entries))
        for e in self.entries:
            name = e.name.encode("utf-8")
            out += struct.pack("<I", len(name))
            out += name
            out += struct.pack("<I", e.data.ndim)
            for d in e.data.shape:
                out += struct.pack("<I", d)
            out += struct.pack("<B", _DTYPE_TAGS[e.dtype])
            wire = "<f8" if e.dtype == "f64" else "<f4"
            out += np.ascontiguousarray(e.data).astype(wire).tobytes()
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        buf = Path(path).read_bytes()
        off = 0

        def take(n: int) -> bytes:
            nonlocal off
            if off + n > len(buf):
                raise CheckpointError(f"truncated checkpoint {path}")
            chunk = buf[off : off + n]
            off += n
            return chunk

        if take(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: version {version} unsupported (want {VERSION})")
        (count,) = struct.unpack("<I", take(4))
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            (tag,) = struct.unpack("<B", take(1))
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype tag {tag}")
            dtype, wire = _TAG_DTYPES[tag]
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(take(n * int(wire[2])), dtype=wire).astype(np.float64)
            entries.append(CheckpointEntry(name, data.reshape(dims), dtype))
        if off != len(buf):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
        return cls(entries=entries)


def save_params(path: str | Path, params: list[Param], dtype: str = "f64") -> None:
    Checkpoint.from_params(params, dtype).save(path)


def load_into_params(path: str | Path, params: list[Param]) -> None:
    """Assign checkpoint tensors into params, matched by name; shapes must agree."""
    ckpt = Checkpoint.load(path)
    by_name = {p.name: p for p in params}
    seen = set()
    for e in ckpt.entries:
        p = by_name.get(e.name)
        if p is None:
            raise CheckpointError(f"checkpoint tensor {e.name!r} has no matching parameter")
        if p.value.shape != e.data.shape:
            raise CheckpointError(
                f"shape mismatch for {e.name!r}: checkpoint {e.data.shape}, model {p.value.shape}"
            )
        p.assign(e.data)
        seen.add(e.name)
    missing = set(by_name) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)}")
