"""MMRT checkpoint files.

Layout: b"MMRT", big-endian u16 version, then the architecture descriptor and
the metadata as u32-length-prefixed UTF-8 JSON. Each array follows as a
u32-length-prefixed UTF-8 name, a u8 precision tag (0 = binary32,
1 = binary64), a u8 rank, big-endian u32 extents and the little-endian
IEEE-754 payload. Arrays run to the end of the file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import RngStream
from .models import ParameterSet, build_model
from .report import atomic_write

MAGIC = b"MMRT"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    architecture: dict
    params: ParameterSet
    metadata: dict = field(default_factory=dict)


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(">I", len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack(">H", VERSION)]
    parts.append(_text(json.dumps(ckpt.architecture, sort_keys=True)))
    parts.append(_text(json.dumps(ckpt.metadata, sort_keys=True)))
    for name in ckpt.params:
        arr = np.asarray(ckpt.params[name])
        if arr.dtype == np.float32:
            tag = 0
        elif arr.dtype == np.float64:
            tag = 1
        else:
            raise CheckpointError(f"array {name}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise CheckpointError(f"array {name}: rank {arr.ndim} too large")
        parts.append(_text(name))
        parts.append(struct.pack(">BB", tag, arr.ndim))
        parts.append(struct.pack(f">{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def text(self, what: str) -> str:
        (n,) = struct.unpack(">I", self.take(4, what + " length"))
        return self.take(n, what).decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.buf)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(bytes(buf))
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not an MMRT checkpoint")
    (version,) = struct.unpack(">H", r.take(2, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {VERSION})")
    arch = json.loads(r.text("architecture"))
    meta = json.loads(r.text("metadata"))
    arrays = {}
    while not r.done():
        name = r.text("array name")
        tag, rank = struct.unpack(">BB", r.take(2, f"{name} header"))
        if tag not in _TAGS:
            raise CheckpointError(f"array {name}: unknown precision tag {tag}")
        shape = struct.unpack(f">{rank}I", r.take(4 * rank, f"{name} extents"))
        dt = _TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(n * dt.itemsize, f"{name} payload")
        arrays[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    # flags and expected shapes come from a throwaway instance of the architecture
    expected = build_model(arch).init(RngStream(0))
    flags = dict(expected.susceptible)
    if set(flags) != set(arrays):
        raise CheckpointError(
            f"array names {sorted(arrays)} do not match architecture {arch.get('kind')}: {sorted(flags)}"
        )
    for n in arrays:
        if arrays[n].shape != expected[n].shape:
            raise CheckpointError(f"size mismatch for {n}: {arrays[n].shape} vs {expected[n].shape}")
    ordered = {n: arrays[n] for n in expected}
    return Checkpoint(arch, ParameterSet(ordered, flags), meta)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    return atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
