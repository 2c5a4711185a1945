"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MOLFUSION-CKPT-v1\\n"
    u64 header length, UTF-8 JSON header (config snapshot, vocabulary, history)
    u32 parameter count, then per parameter:
        u16 name length, UTF-8 name, u8 ndim, u64 * ndim shape, float64 values (row-major)
    32-byte SHA-256 of every preceding byte
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .utils import atomic_write

MAGIC = b"MOLFUSION-CKPT-v1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    vocab: dict
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        header = json.dumps({"config": self.config, "vocab": self.vocab, "history": self.history},
                            sort_keys=True, separators=(",", ":")).encode()
        out = [MAGIC, struct.pack("<Q", len(header)), header, struct.pack("<I", len(self.params))]
        for name in sorted(self.params):
            arr = np.asarray(self.params[name], dtype="<f8", order="C")
            raw = name.encode()
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.tobytes())
        body = b"".join(out)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if not blob.startswith(MAGIC):
            raise CheckpointError("not a MOLFUSION-CKPT-v1 file")
        if len(blob) < len(MAGIC) + 32:
            raise CheckpointError("truncated checkpoint")
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checksum mismatch; checkpoint is corrupted")
        pos = len(MAGIC)
        (hlen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        header = json.loads(body[pos:pos + hlen])
        pos += hlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(body, "<f8", size, pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        if pos != len(body):
            raise CheckpointError("trailing bytes after parameter blocks")
        return cls(header["config"], header["vocab"], params, header.get("history", []))


def save(ckpt: Checkpoint, path) -> None:
    atomic_write(path, ckpt.to_bytes())


def load(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
