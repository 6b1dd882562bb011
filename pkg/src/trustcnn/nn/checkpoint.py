"""Binary checkpoint format.

Layout (little-endian): b"TCN1", u32 layer count, then for every parametrized
layer: u32 name length, UTF-8 name, and for weight then bias a u32 rank, the
u32 extents and the f32 data. A u32 CRC32 of all preceding bytes closes the file.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .layers import Model

MAGIC = b"TCN1"


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def encode(model: Model) -> bytes:
    layers = model.param_layers
    parts = [MAGIC, struct.pack("<I", len(layers))]
    for layer in layers:
        name = layer.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(_pack_array(layer.weight.data))
        parts.append(_pack_array(layer.bias.data))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(encode(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self) -> np.ndarray:
        rank = self.u32()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def decode(buf: bytes) -> list[tuple[str, np.ndarray, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 12:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcMismatchError("checkpoint CRC32 mismatch")
    r = _Reader(body)
    r.take(4)
    entries = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        entries.append((name, r.array(), r.array()))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes before CRC")
    return entries


def read_entries(path) -> list[tuple[str, np.ndarray, np.ndarray]]:
    return decode(Path(path).read_bytes())


def load_checkpoint(path, model: Model) -> Model:
    """Load weights into `model` in place, verifying names and shapes; returns it."""
    entries = read_entries(path)
    layers = model.param_layers
    if [e[0] for e in entries] != [l.name for l in layers]:
        raise ArchitectureMismatchError(
            f"checkpoint layers {[e[0] for e in entries]} do not match model {[l.name for l in layers]}"
        )
    for (name, w, b), layer in zip(entries, layers):
        if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
            raise ArchitectureMismatchError(
                f"layer {name!r}: checkpoint shapes {w.shape}/{b.shape}, "
                f"model expects {layer.weight.shape}/{layer.bias.shape}"
            )
    for (_, w, b), layer in zip(entries, layers):
        layer.weight.data = w
        layer.bias.data = b
    return model
