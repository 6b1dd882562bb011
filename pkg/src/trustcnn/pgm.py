"""Binary PGM (P5, maxval 255) read/write."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_u8(values: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.rint(v * 255.0).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    """Write a [0, 1] H x W array as an 8-bit P5 file."""
    pix = to_u8(values)
    if pix.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {pix.shape}")
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file back as float32 values in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pix = np.frombuffer(buf[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise ValueError(f"{path}: truncated PGM")
    return (pix.reshape(h, w).astype(np.float32) / np.float32(maxval)).astype(np.float32)
