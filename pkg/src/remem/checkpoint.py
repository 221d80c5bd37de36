"""Binary checkpoint format for named f32 tensors.

Layout (little-endian): ``b"RMEM"``, u32 version, u32 tensor count, then per
tensor: u16 name length, UTF-8 name, u8 dtype tag (0 = f32), u8 rank, rank x
u32 dims, row-major f32 payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError, MagicError, TensorMismatchError, TruncationError, VersionError
from .nn import LoraConfig, VitConfig, VitModel

MAGIC = b"RMEM"
VERSION = 1
DTYPE_F32 = 0


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(f"truncated while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(buf: bytes, magic: bytes = MAGIC) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4, "magic") != magic:
        raise MagicError(f"bad magic: expected {magic!r}")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        tag, rank = r.unpack("<BB", f"header of {name!r}")
        if tag != DTYPE_F32:
            raise FormatError(f"tensor {name!r}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        n = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return tensors


def save_checkpoint(model: VitModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensors(model.state_dict()))


def load_checkpoint(path: str | os.PathLike, config: VitConfig, lora: LoraConfig | None = None,
                    strict: bool = True) -> VitModel:
    """Build a model for ``config`` and fill it from ``path``.

    Nothing is returned unless the whole file validates, so a failed load
    leaves no partial state behind.
    """
    with open(path, "rb") as fh:
        tensors = decode_tensors(fh.read())
    model = VitModel(config, dtype=np.float32)
    if lora is not None:
        model.attach_lora(lora)
    expected = {n: t.shape for n, t in model.params.items()}
    unknown = sorted(set(tensors) - set(expected))
    missing = sorted(set(expected) - set(tensors))
    if strict and unknown:
        raise TensorMismatchError(f"unknown tensors in checkpoint: {unknown}")
    if missing:
        raise TensorMismatchError(f"checkpoint is missing tensors: {missing}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise TensorMismatchError(f"tensor {name!r}: shape {tensors[name].shape} vs config {shape}")
    model.load_state_dict({n: tensors[n] for n in expected})
    return model
