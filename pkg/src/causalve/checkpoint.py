"""CVEK checkpoint files.

Layout (little-endian)::

    b"CVEK" | config hash (32 bytes) | uint32 record count
    per record, in sorted name order:
        uint16 name length | utf-8 name | uint8 ndim | uint32 dims[ndim] | float32 data
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, KeyMismatch

MAGIC = b"CVEK"
HASH_LEN = 32


def save_checkpoint(path, state: dict, config_hash: bytes) -> None:
    if len(config_hash) != HASH_LEN:
        raise ValueError(f"config hash must be {HASH_LEN} bytes")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, config_hash, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name].detach().cpu().numpy(), dtype="<f4")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path, expected_hash: bytes | None = None):
    """Return ``(state_dict, config_hash)``; raise KeyMismatch on a hash mismatch."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a CVEK checkpoint")
    pos = 4
    try:
        config_hash = data[pos:pos + HASH_LEN]
        pos += HASH_LEN
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(data):
                raise FormatError(f"{path}: record {name!r} truncated")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            state[name] = torch.from_numpy(arr.astype(np.float32))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    if expected_hash is not None and config_hash != expected_hash:
        raise KeyMismatch("checkpoint was written for a different configuration")
    return state, config_hash


def save_module(path, module: torch.nn.Module, config_hash: bytes) -> None:
    save_checkpoint(path, module.state_dict(), config_hash)


def load_module(path, module: torch.nn.Module, config_hash: bytes | None = None):
    state, h = load_checkpoint(path, config_hash)
    module.load_state_dict(state)
    return module
