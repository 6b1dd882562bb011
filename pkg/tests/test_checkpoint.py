import struct
import zlib

import numpy as np
import pytest

from trustcnn.nn.checkpoint import (
    MAGIC, ArchitectureMismatchError, BadMagicError, CrcMismatchError, decode, encode, load_checkpoint,
    read_entries, save_checkpoint,
)
from trustcnn.nn.layers import default_model
from trustcnn.pgm import read_pgm, to_u8, write_pgm


def test_round_trip_is_bit_exact(tmp_path):
    src = default_model(4, seed=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(src, path)
    dst = load_checkpoint(path, default_model(4, seed=2))
    for a, b in zip(src.param_layers, dst.param_layers):
        assert a.weight.data.tobytes() == b.weight.data.tobytes()
        assert a.bias.data.tobytes() == b.bias.data.tobytes()


def test_layout_header_and_crc():
    buf = encode(default_model(2))
    assert buf[:4] == MAGIC
    assert struct.unpack("<I", buf[4:8])[0] == 3
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])
    names = [e[0] for e in decode(buf)]
    assert names == ["conv1", "conv2", "dense"]


def test_corrupt_byte_gives_crc_error(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(default_model(2), path)
    buf = bytearray(path.read_bytes())
    buf[40] ^= 0xFF
    path.write_bytes(bytes(buf))
    with pytest.raises(CrcMismatchError):
        read_entries(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOPE" + encode(default_model(2))[4:])
    with pytest.raises(BadMagicError):
        read_entries(path)


def test_mismatched_architecture_names_layer(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(default_model(4), path)
    with pytest.raises(ArchitectureMismatchError, match="dense"):
        load_checkpoint(path, default_model(3))


def test_pgm_round_trip(tmp_path, rng):
    values = np.rint(rng.uniform(0, 1, (5, 7)) * 255) / 255
    write_pgm(tmp_path / "a.pgm", values)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (5, 7)
    np.testing.assert_array_equal(to_u8(back), to_u8(values))
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")


def test_pgm_rejects_3d(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "a.pgm", np.zeros((2, 2, 2)))
