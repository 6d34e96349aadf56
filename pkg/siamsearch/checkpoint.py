"""
Binary checkpoint container.

Layout (little-endian):
    magic  b"SSCK" | version u16 | metadata length u32 | metadata (UTF-8 JSON)
    tensor count u32
    per tensor: name length u16 | name | ndim u8 | dims u32 * ndim
    tensor data as float32, in table order
    CRC32 of everything above, u32
"""

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autograd import BatchNormState, Tensor
from .errors import CheckpointError
from .optim import Optimizer

logger = logging.getLogger(__name__)

MAGIC = b"SSCK"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_COUNT = struct.Struct("<I")
_NAME_LEN = struct.Struct("<H")
_NDIM = struct.Struct("<B")
_CRC = struct.Struct("<I")
_F4 = np.dtype("<f4")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts = [_HEADER.pack(MAGIC, VERSION, len(meta)), meta, _COUNT.pack(len(ckpt.tensors))]
    blobs = []
    for name, array in ckpt.tensors.items():
        encoded = name.encode()
        parts += [_NAME_LEN.pack(len(encoded)), encoded, _NDIM.pack(array.ndim)]
        parts += [struct.pack(f"<{array.ndim}I", *array.shape)]
        blobs.append(np.ascontiguousarray(array, dtype=_F4).tobytes())
    body = b"".join(parts + blobs)
    return body + _CRC.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size + _CRC.size:
        raise CheckpointError("checkpoint is truncated")
    body, (crc,) = data[: -_CRC.size], _CRC.unpack(data[-_CRC.size :])
    reader = _Reader(body)
    magic, version, meta_len = reader.unpack(_HEADER)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    meta = json.loads(reader.take(meta_len))
    (count,) = reader.unpack(_COUNT)
    table = []
    for _ in range(count):
        (name_len,) = reader.unpack(_NAME_LEN)
        name = reader.take(name_len).decode()
        (ndim,) = reader.unpack(_NDIM)
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(n * _F4.itemsize), dtype=_F4).reshape(shape).astype(np.float32)
    if reader.pos != len(body):
        raise CheckpointError("trailing bytes after tensor data")
    return Checkpoint(tensors, meta)


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> Path:
    """Atomic write: a temp file in the same directory is renamed over path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logger.debug("Saved checkpoint epoch %d to %s", ckpt.epoch, path)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


# network state


def capture_state(
    params: list[Tensor],
    bn_states: list[BatchNormState],
    optimizer: Optimizer | None = None,
) -> dict[str, np.ndarray]:
    """Named arrays for parameters, BN running statistics and optimizer buffers."""
    tensors = {f"param.{i}": p.data for i, p in enumerate(params)}
    for i, state in enumerate(bn_states):
        tensors[f"bn.{i}.mean"] = state.running_mean
        tensors[f"bn.{i}.var"] = state.running_var
    if optimizer is not None:
        for kind, buffers in optimizer.buffers().items():
            for i, buf in enumerate(buffers):
                if buf is not None:
                    tensors[f"opt.{kind}.{i}"] = buf
    return tensors


def _checked(tensors: dict[str, np.ndarray], name: str, shape: tuple[int, ...]) -> np.ndarray:
    if name not in tensors:
        raise CheckpointError(f"checkpoint lacks {name}")
    array = tensors[name]
    if array.shape != tuple(shape):
        raise CheckpointError(f"{name} has shape {array.shape}, expected {tuple(shape)}")
    return array


def restore_state(
    tensors: dict[str, np.ndarray],
    params: list[Tensor],
    bn_states: list[BatchNormState],
    optimizer: Optimizer | None = None,
) -> None:
    for i, p in enumerate(params):
        p.data = _checked(tensors, f"param.{i}", p.shape).astype(p.dtype)
    for i, state in enumerate(bn_states):
        state.running_mean = _checked(tensors, f"bn.{i}.mean", state.running_mean.shape).astype(state.running_mean.dtype)
        state.running_var = _checked(tensors, f"bn.{i}.var", state.running_var.shape).astype(state.running_var.dtype)
    if optimizer is not None:
        restored = {}
        for kind in optimizer.buffers():
            restored[kind] = [
                tensors[f"opt.{kind}.{i}"].astype(p.dtype) if f"opt.{kind}.{i}" in tensors else None
                for i, p in enumerate(optimizer.params)
            ]
        optimizer.load_buffers(restored)
