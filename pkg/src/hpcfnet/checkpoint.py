"""Binary checkpoint archive.

Layout (all integers little-endian)::

    magic  b"HPCFCKPT"   version u32
    config_len u32, config JSON (UTF-8)
    count u32, then per entry:
        name_len u16, name (UTF-8), kind u8 (0 param, 1 buffer),
        itemsize u8 (4 or 8), ndim u8, dims u32 * ndim, payload
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, build_model

MAGIC = b"HPCFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model) -> None:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    entries = [(n, 0, t.data) for n, t in model.named_parameters()]
    entries += [(n, 1, a) for n, a in model.named_buffers()]
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
              struct.pack("<I", len(entries))]
    for name, kind, arr in entries:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<BBB", kind, dt.itemsize, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(dt, copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw (config dict, name -> array) contents of a checkpoint file."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        return _parse(buf, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc


def _parse(buf: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    (clen,) = struct.unpack_from("<I", buf, 12)
    pos = 16
    config = json.loads(buf[pos:pos + clen].decode("utf-8"))
    pos += clen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        _kind, itemsize, ndim = struct.unpack_from("<BBB", buf, pos)
        pos += 3
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = np.dtype(f"<f{itemsize}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * itemsize
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(buf, dtype=dt, count=nbytes // itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    return config, arrays


def load_checkpoint(path):
    """Rebuild the model described by a checkpoint and fill in its weights."""
    config, arrays = read_checkpoint(path)
    model = build_model(ModelConfig.from_dict(config))
    for name, t in model.named_parameters():
        if name not in arrays or arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: missing or mis-shaped parameter {name}")
        t.data = arrays[name].astype(t.dtype)
    for name, buf in model.named_buffers():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing buffer {name}")
        buf[:] = arrays[name]
    return model
