"""Checkpoint container and its binary file format.

Layout (all integers little-endian)::

    b"PKDS"  u16 version
    u32 len  arch descriptor, canonical JSON text (utf-8)
    f32[]    parameters in descriptor order, weights then bias per layer
    u8       1 if Adam state follows, else 0
             [u64 step, f32[] first moments, f32[] second moments]
    u32 len  meta, canonical JSON text (utf-8)
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adam import AdamState
from .arch import ArchDescriptor

MAGIC = b"PKDS"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch: ArchDescriptor
    params: list[np.ndarray]
    adam_state: AdamState | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if len(shapes) != len(self.params):
            raise CheckpointError(f"arch has {len(shapes)} parameter tensors, got {len(self.params)}")
        for i, (p, s) in enumerate(zip(self.params, shapes)):
            if tuple(p.shape) != s:
                raise CheckpointError(f"parameter {i} shape {p.shape} does not match arch {s}")

    def to_bytes(self) -> bytes:
        return dumps(self)

    def save(self, path) -> Path:
        """Write atomically; checkpoints are immutable once on disk."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + f".tmp{os.getpid()}")
        tmp.write_bytes(dumps(self))
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return loads(Path(path).read_bytes())


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _canonical(meta: dict) -> str:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"))


def dumps(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), _text(ckpt.arch.canonical_text())]
    parts += [np.ascontiguousarray(p, dtype="<f4").tobytes() for p in ckpt.params]
    if ckpt.adam_state is None:
        parts.append(b"\x00")
    else:
        st = ckpt.adam_state
        parts.append(b"\x01" + struct.pack("<Q", st.step))
        parts += [np.ascontiguousarray(m, dtype="<f4").tobytes() for m in st.m]
        parts += [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in st.v]
    parts.append(_text(_canonical(ckpt.meta)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def text(self) -> str:
        return self.take(self.unpack("<I")).decode("utf-8")

    def tensors(self, shapes):
        out = []
        for shape in shapes:
            n = int(np.prod(shape))
            out.append(np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape))
        return out


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = ArchDescriptor.from_text(r.text())
    shapes = arch.param_shapes()
    params = r.tensors(shapes)
    state = None
    if r.take(1) == b"\x01":
        step = r.unpack("<Q")
        state = AdamState(r.tensors(shapes), r.tensors(shapes), step)
    meta = json.loads(r.text())
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(arch, params, state, meta)
