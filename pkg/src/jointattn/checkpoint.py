"""Versioned binary checkpoints.

Layout (little-endian)::

    b"JACKPT"  u32 version
    u32 config_len, config text (UTF-8, ``key = value`` lines)
    u32 n_params, n_params x tensor record
    u32 epoch, u32 step, u32 n_buffers, n_buffers x tensor record

    tensor record: u16 name_len, name (UTF-8), u32 ndim, ndim x u32 dims,
                   prod(dims) x f64 data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import FormatError

MAGIC = b"JACKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    epoch: int = 0
    step: int = 0
    velocity: dict = field(default_factory=dict)


def _write_tensor(out: list, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    out.append(struct.pack("<H", len(encoded)))
    out.append(encoded)
    out.append(struct.pack("<I", array.ndim))
    out.append(struct.pack(f"<{array.ndim}I", *array.shape))
    out.append(np.ascontiguousarray(array, dtype="<f8").tobytes())


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    text = ckpt.config.to_text().encode("utf-8")
    out += [struct.pack("<I", len(text)), text, struct.pack("<I", len(ckpt.params))]
    for name, array in ckpt.params.items():
        _write_tensor(out, name, np.asarray(array))
    out.append(struct.pack("<III", ckpt.epoch, ckpt.step, len(ckpt.velocity)))
    for name, array in ckpt.velocity.items():
        _write_tensor(out, name, np.asarray(array))
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated: need {n} bytes, {len(self.raw) - self.pos} left", offset=self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8")
        (ndim,) = self.unpack("<I")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, data


def from_bytes(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
    (n,) = r.unpack("<I")
    config = ModelConfig.from_text(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<I")
    params = dict(r.tensor() for _ in range(count))
    epoch, step, n_vel = r.unpack("<III")
    velocity = dict(r.tensor() for _ in range(n_vel))
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after checkpoint", offset=r.pos)
    return Checkpoint(config, params, epoch, step, velocity)


def save(path, ckpt: Checkpoint) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
