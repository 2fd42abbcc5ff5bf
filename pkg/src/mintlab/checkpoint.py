"""Binary container shared by audited-model and MINT checkpoints.

Layout (little-endian)::

    magic[8] | u32 version | u32 len | config JSON (UTF-8) | u32 count
    count x ( u16 len | name | u8 ndim | u32 dims[ndim] | f32 data )
"""
import hashlib
import json
import struct

import numpy as np

from .errors import FormatError

VERSION = 1


def write_container(path, magic, config, arrays):
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [magic, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).digest()


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path, magic):
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    got = r.take(len(magic), "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset=0)
    version, cfg_len = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=len(magic))
    at = r.pos
    try:
        config = json.loads(r.take(cfg_len, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config: {exc}", offset=at) from None
    (count,) = r.unpack("<I", "tensor count")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode()
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(nbytes, f"tensor {name}"), dtype="<f4").reshape(shape).copy()
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", offset=r.pos)
    return config, arrays


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).digest()
