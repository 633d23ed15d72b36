"""Versioned little-endian binary checkpoint format.

Layout::

    b"S4FM"                      magic
    u32                          format version
    32 bytes                     config digest (SHA-256)
    u32                          tensor count
    per tensor:
        u32 name length, UTF-8 name
        u8  dtype tag (1 = f64)
        u32 rank, u64 * rank dims
        little-endian f64 data
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"S4FM"
VERSION = 1
DTYPE_F64 = 1
DIGEST_SIZE = 32


class CheckpointError(ValueError):
    pass


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def encode_checkpoint(tensors, digest: bytes) -> bytes:
    if len(digest) != DIGEST_SIZE:
        raise CheckpointError(f"digest must be {DIGEST_SIZE} bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t.detach().cpu().to(torch.float64).numpy(), dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(blob: bytes, expected_digest: bytes | None = None):
    """Returns ``(digest, OrderedDict[name, float64 tensor])``."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic; not an S4FM checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = bytes(take(DIGEST_SIZE))
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("checkpoint was written for a different model configuration")
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag != DTYPE_F64:
            raise CheckpointError(f"unsupported dtype tag {tag} for {name}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims)
        tensors[name] = torch.from_numpy(data.astype(np.float64))
    if pos != len(view):
        raise CheckpointError("trailing bytes after tensor table")
    return digest, tensors


def save_checkpoint(path, tensors, digest: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors, digest))


def load_checkpoint(path, expected_digest: bytes | None = None):
    return decode_checkpoint(Path(path).read_bytes(), expected_digest)


def load_into(model: torch.nn.Module, tensors) -> None:
    """Copy decoded tensors into ``model``, restoring each entry's dtype."""
    state = model.state_dict()
    missing = set(state) - set(tensors)
    unexpected = set(tensors) - set(state)
    if missing or unexpected:
        raise CheckpointError(f"tensor table mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    model.load_state_dict(
        OrderedDict((k, tensors[k].to(state[k].dtype).reshape(state[k].shape)) for k in state)
    )
