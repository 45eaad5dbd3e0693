"""Versioned binary container shared by networks, classifiers and GAN checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"MALD2GAN"
    version      uint32    FORMAT_VERSION
    kind         uint32 length + UTF-8 bytes   e.g. "network", "classifier", "gan"
    metadata     uint32 length + UTF-8 JSON    layer list, hyperparameters, ...
    n_blocks     uint32
    n_blocks times:
        name     uint32 length + UTF-8 bytes
        dtype    1 byte    b"f" (float64) or b"i" (int64)
        ndim     uint32
        shape    ndim x uint64
        data     prod(shape) x 8 bytes, little-endian, row-major
    crc32        uint32    over every preceding byte

Floats are stored as ``<f8`` so a save/load round-trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"MALD2GAN"
FORMAT_VERSION = 1

_DTYPES = {b"f": np.dtype("<f8"), b"i": np.dtype("<i8")}


class ContainerError(ValueError):
    """Raised when a container file is malformed, truncated or of the wrong version."""


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(kind: str, metadata: dict, blocks: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(kind),
             _pack_str(json.dumps(metadata, sort_keys=True)),
             struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            code = b"f"
        elif arr.dtype.kind in "iub":
            code = b"i"
        else:
            raise TypeError(f"block {name!r}: unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        parts.append(_pack_str(name))
        parts.append(code)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(f"truncated file: expected {n} bytes for {what} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(what + " length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"{what} is not valid UTF-8") from exc


def decode(buf: bytes, expected_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(buf) == 0:
        raise ContainerError("empty file")
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise ContainerError("bad magic string: not a mald2gan container")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    kind = r.string("kind")
    if expected_kind is not None and kind != expected_kind:
        raise ContainerError(f"container holds {kind!r}, expected {expected_kind!r}")
    try:
        metadata = json.loads(r.string("metadata"))
    except json.JSONDecodeError as exc:
        raise ContainerError(f"metadata is not valid JSON: {exc}") from exc
    blocks: dict[str, np.ndarray] = {}
    for _ in range(r.u32("block count")):
        name = r.string("block name")
        code = r.take(1, f"dtype of {name}")
        if code not in _DTYPES:
            raise ContainerError(f"block {name!r}: unknown dtype code {code!r}")
        ndim = r.u32(f"ndim of {name}")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, f"shape of {name}"))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(8 * count, f"data of {name}")
        blocks[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
    body_end = r.pos
    crc = r.u32("checksum")
    if crc != zlib.crc32(buf[:body_end]):
        raise ContainerError("checksum mismatch: file is corrupt")
    if r.pos != len(buf):
        raise ContainerError(f"{len(buf) - r.pos} trailing bytes after checksum")
    return kind, metadata, blocks


def write(path, kind: str, metadata: dict, blocks: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(kind, metadata, blocks))


def read(path, expected_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), expected_kind)
