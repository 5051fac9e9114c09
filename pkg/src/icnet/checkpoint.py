"""Binary checkpoint format.

Layout (little-endian)::

    b"ICNT"  u32 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64), u8 rank,
              rank x u32 dims, payload }
    u32 CRC-32 of every preceding byte

The iteration counter and config hash travel as two reserved f64 tensors.
"""

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from icnet.errors import (
    CheckpointCRCError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    ConfigHashMismatchError,
)

MAGIC = b"ICNT"
VERSION = 1
ITER_KEY = "__iteration__"
HASH_KEY = "__config_hash__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    iteration: int = 0
    config_hash: str = ""


def model_state(model):
    """Ordered ``{name: array}`` of parameters then buffers."""
    state = {name: p.data for name, p in model.named_params()}
    state.update({name: b for name, b in model.named_buffers()})
    return state


def encode(tensors, iteration=0, config_hash=""):
    hash_bytes = bytes.fromhex(config_hash) if config_hash else b""
    items = list(tensors.items())
    items.append((ITER_KEY, np.array([iteration], np.float64)))
    items.append((HASH_KEY, np.frombuffer(hash_bytes, np.uint8).astype(np.float64)))
    out = bytearray(MAGIC + struct.pack("<II", VERSION, len(items)))
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def decode(buf):
    """Parse and verify a checkpoint; nothing is returned unless all checks pass."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < 16:
        raise CheckpointTruncatedError(f"file of {len(buf)} bytes is too short")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointMagicError(f"unsupported version {version}, expected {VERSION}")
    body, (crc,) = buf[:-4], struct.unpack_from("<I", buf, len(buf) - 4)
    (count,) = struct.unpack_from("<I", buf, 8)
    tensors = {}
    pos = 12
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            if pos + n > len(body):
                raise struct.error
            name = bytes(body[pos : pos + n]).decode("utf-8", errors="replace")
            pos += n
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if code not in _DTYPES:
                if zlib.crc32(body) != crc:
                    raise CheckpointCRCError(f"CRC mismatch (tensor {name!r} has dtype code {code})")
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            nbytes = dt.itemsize * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise struct.error
            tensors[name] = np.frombuffer(body, dt, nbytes // dt.itemsize, pos).reshape(dims).copy()
            pos += nbytes
    except struct.error:
        raise CheckpointTruncatedError(f"file truncated while reading tensor {len(tensors) + 1} of {count}") from None
    if pos != len(body) and zlib.crc32(body) == crc:
        raise CheckpointTruncatedError(f"{len(body) - pos} unexpected bytes before the CRC")
    if zlib.crc32(body) != crc:
        raise CheckpointCRCError(f"CRC mismatch: stored {crc:08x}, computed {zlib.crc32(body):08x}")
    it = tensors.pop(ITER_KEY, np.zeros(1))
    h = tensors.pop(HASH_KEY, np.zeros(0))
    return Checkpoint(tensors, int(it[0]), bytes(h.astype(np.uint8)).hex())


def save_checkpoint(model, path, iteration=0):
    data = encode(model_state(model), iteration, model.config.digest())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return path


def read_checkpoint(path):
    with open(path, "rb") as f:
        return decode(f.read())


def load_checkpoint(model, path):
    """Load ``path`` into ``model`` (in place); returns the :class:`Checkpoint`.

    The config hash must match the model's, and every tensor name and shape
    must agree, before any value is copied.
    """
    ckpt = read_checkpoint(path)
    expected = model.config.digest()
    if ckpt.config_hash != expected:
        raise ConfigHashMismatchError(expected, ckpt.config_hash)
    params = dict(model.named_params())
    buffers = dict(model.named_buffers())
    names = set(params) | set(buffers)
    if names != set(ckpt.tensors):
        missing = sorted(names - set(ckpt.tensors))
        extra = sorted(set(ckpt.tensors) - names)
        raise CheckpointError(f"tensor set differs (missing {missing}, unexpected {extra})")
    for name, arr in ckpt.tensors.items():
        cur = params[name].data if name in params else buffers[name]
        if cur.shape != arr.shape or cur.dtype != arr.dtype:
            raise CheckpointError(f"tensor {name!r}: checkpoint {arr.dtype}{arr.shape} vs model {cur.dtype}{cur.shape}")
    for name, arr in ckpt.tensors.items():
        if name in params:
            params[name].data = arr.astype(arr.dtype.newbyteorder("="))
            params[name].grad = np.zeros_like(params[name].data)
        else:
            np.copyto(buffers[name], arr)
    return ckpt
