"""Versioned binary checkpoint: magic "VADF", config header, CRC-checked blobs.

Layout (all integers little-endian):

    "VADF" | u32 version | u32 header_len | header JSON
    u32 blob_count
    per blob: u8 kind (0 param, 1 buffer) | u16 name_len | name utf-8
              | u8 ndim | u32 dim... | float32 data | u32 crc32(data)
    u32 crc32 of everything above

The JSON header embeds the model and frontend configuration plus the
parameter count, so loading needs no external config. Failure modes are
distinct: bad magic/version, truncation, and CRC mismatch each raise their
own exception.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .dsp import FrontendConfig
from .errors import (CheckpointChecksumError, CheckpointError,
                     CheckpointTruncatedError, CheckpointVersionError)
from .model import ModelConfig, VadModel

MAGIC = b"VADF"
VERSION = 1


def _blob_bytes(kind: int, name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    name_b = name.encode("utf-8")
    out = struct.pack("<BH", kind, len(name_b)) + name_b
    out += struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += data
    out += struct.pack("<I", zlib.crc32(data))
    return out


def save_checkpoint(model: VadModel, path) -> None:
    """Serialize parameters, buffers, and configuration; bit-exact round trip."""
    header = json.dumps({
        "format": "vadforge-checkpoint",
        "model": model.config.to_dict(),
        "frontend": model.frontend.to_dict(),
        "parameter_count": model.parameter_count(),
    }, sort_keys=True).encode("utf-8")

    params = list(model.named_parameters())
    buffers = list(model.named_buffers())
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<I", VERSION))
    body.write(struct.pack("<I", len(header)))
    body.write(header)
    body.write(struct.pack("<I", len(params) + len(buffers)))
    for name, p in params:
        body.write(_blob_bytes(0, name, p.data))
    for name, b in buffers:
        body.write(_blob_bytes(1, name, b))
    content = body.getvalue()
    with open(path, "wb") as f:
        f.write(content)
        f.write(struct.pack("<I", zlib.crc32(content)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint ends at byte {len(self.data)}, "
                f"needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> VadModel:
    """Rebuild the model from a checkpoint file (config included)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointTruncatedError(f"{path}: file too small to be a checkpoint")
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic, not a vadforge checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {VERSION}")

    header_raw = r.take(r.u32())
    try:
        header = json.loads(header_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointChecksumError(f"{path}: config header corrupt: {e}") from e

    blobs: dict[str, tuple[int, np.ndarray]] = {}
    for _ in range(r.u32()):
        kind = r.u8()
        try:
            name = r.take(r.u16()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointChecksumError(f"{path}: blob name corrupt: {e}") from e
        ndim = r.u8()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        data = r.take(n_bytes)
        crc = r.u32()
        if zlib.crc32(data) != crc:
            raise CheckpointChecksumError(f"{path}: blob {name!r} failed its CRC")
        blobs[name] = (kind, np.frombuffer(data, dtype="<f4").reshape(shape))
    trailer_pos = r.pos
    file_crc = r.u32()
    if r.pos != len(raw):
        raise CheckpointTruncatedError(
            f"{path}: {len(raw) - r.pos} trailing bytes after the CRC trailer")
    if zlib.crc32(raw[:trailer_pos]) != file_crc:
        raise CheckpointChecksumError(f"{path}: file-level CRC mismatch")

    model = VadModel(ModelConfig.from_dict(header["model"]),
                     FrontendConfig.from_dict(header["frontend"]))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    if set(blobs) != expected:
        missing = expected - set(blobs)
        extra = set(blobs) - expected
        raise CheckpointError(
            f"{path}: parameter set mismatch (missing={sorted(missing)}, "
            f"extra={sorted(extra)})")
    for name, (kind, arr) in blobs.items():
        if kind == 0:
            p = params[name]
            if p.data.shape != arr.shape:
                raise CheckpointError(
                    f"{path}: {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype)
        else:
            buf = buffers[name]
            if buf.shape != arr.shape:
                raise CheckpointError(
                    f"{path}: {name} has shape {arr.shape}, expected {buf.shape}")
            buf[...] = arr.astype(buf.dtype)
    model.eval()
    return model
