import struct
import zlib

import numpy as np
import pytest

from siamsearch.autograd import BatchNormState, parameter
from siamsearch.checkpoint import (
    MAGIC,
    Checkpoint,
    capture_state,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    restore_state,
    save_checkpoint,
)
from siamsearch.errors import CheckpointError
from siamsearch.optim import SGD


def _checkpoint():
    return Checkpoint(
        tensors={
            "param.0": np.arange(6, dtype=np.float32).reshape(2, 3),
            "param.1": np.array([0.1, -0.2], dtype=np.float32),
            "scalar": np.array(3.5, dtype=np.float32),
        },
        meta={"epoch": 4, "losses": [-0.1, -0.25]},
    )


def test_header_layout():
    data = encode_checkpoint(_checkpoint())
    magic, version, meta_len = struct.unpack_from("<4sHI", data)
    assert magic == MAGIC == b"SSCK"
    assert version == 1
    meta = data[10 : 10 + meta_len]
    assert b'"epoch": 4' in meta
    (crc,) = struct.unpack("<I", data[-4:])
    assert crc == zlib.crc32(data[:-4])


def test_encode_decode_preserves_tensors_and_meta():
    ckpt = _checkpoint()
    back = decode_checkpoint(encode_checkpoint(ckpt))
    assert back.meta == ckpt.meta
    assert back.epoch == 4
    assert list(back.tensors) == list(ckpt.tensors)
    for name, array in ckpt.tensors.items():
        assert back.tensors[name].shape == array.shape
        np.testing.assert_array_equal(back.tensors[name], array)


def test_flipped_byte_fails_the_checksum():
    data = bytearray(encode_checkpoint(_checkpoint()))
    data[-10] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(data))


def test_truncated_and_foreign_files():
    data = encode_checkpoint(_checkpoint())
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:8])
    body = b"NOPE" + data[4:-4]
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_unsupported_version():
    data = encode_checkpoint(_checkpoint())
    body = data[:4] + struct.pack("<H", 2) + data[6:-4]
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_save_is_atomic_and_overwrites(tmp_path):
    path = tmp_path / "nested" / "checkpoint.ckpt"
    save_checkpoint(_checkpoint(), path)
    second = _checkpoint()
    second.meta["epoch"] = 5
    save_checkpoint(second, path)
    assert load_checkpoint(path).epoch == 5
    assert [p.name for p in path.parent.iterdir()] == ["checkpoint.ckpt"]


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_capture_and_restore_network_state():
    w, b = parameter(np.ones((2, 2))), parameter(np.zeros(2))
    bn = BatchNormState.create(2)
    bn.running_mean = np.array([0.5, -0.5], dtype=np.float32)
    opt = SGD([w, b], lr=0.1)
    w.grad = np.full((2, 2), 0.5, dtype=np.float32)
    opt.step()
    tensors = decode_checkpoint(encode_checkpoint(Checkpoint(capture_state([w, b], [bn], opt)))).tensors
    assert "opt.momentum.0" in tensors
    assert "opt.momentum.1" not in tensors

    w2, b2 = parameter(np.zeros((2, 2))), parameter(np.ones(2))
    bn2 = BatchNormState.create(2)
    opt2 = SGD([w2, b2], lr=0.1)
    restore_state(tensors, [w2, b2], [bn2], opt2)
    np.testing.assert_array_equal(w2.data, w.data)
    np.testing.assert_array_equal(b2.data, b.data)
    np.testing.assert_array_equal(bn2.running_mean, bn.running_mean)
    np.testing.assert_array_equal(opt2.buffers()["momentum"][0], opt.buffers()["momentum"][0])
    assert opt2.buffers()["momentum"][1] is None


def test_restore_rejects_shape_mismatch():
    tensors = capture_state([parameter(np.ones(3))], [])
    with pytest.raises(CheckpointError):
        restore_state(tensors, [parameter(np.ones(4))], [])
    with pytest.raises(CheckpointError):
        restore_state({}, [parameter(np.ones(3))], [])
