"""Portable parameter checkpoints.

Byte layout (all integers little-endian)::

    magic      8 bytes   b"MV3DCKPT"
    version    u32       1
    count      u32       number of entries
    entry * count, sorted by name:
        name_len  u32
        name      name_len bytes, UTF-8, dotted parameter name
        ndim      u32
        dims      u64 * ndim
        payload   prod(dims) * 8 bytes, float64 little-endian, C order

A scalar has ``ndim = 0`` and one float of payload. Trailing bytes are an
error.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor, parameter

MAGIC = b"MV3DCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        t = params[name]
        # asarray keeps 0-d arrays 0-d (ascontiguousarray would promote them to 1-d)
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, params: dict) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def load_into(params: dict, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy arrays into existing parameter tensors by name."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if strict and (missing or extra):
        raise CheckpointError(f"name mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    for name, arr in arrays.items():
        if name not in params:
            continue
        if params[name].shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} does not match {params[name].shape}")
        params[name].data[...] = arr


def as_parameters(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: parameter(v, k) for k, v in arrays.items()}
