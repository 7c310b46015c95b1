"""Named-tensor binary container used for encoder weights and checkpoints.

Layout (little-endian)::

    b"A3LN" | u32 version | str kind | u32 n_meta | (str key, str value)*
    | u32 n_records | record* | u32 footer_len | footer bytes | sha256[32]

where ``str`` is a u32 byte length followed by UTF-8, and each record is
``str name | u32 rank | u64 extents[rank] | float32 values``. The trailing
digest covers every preceding byte.
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

MAGIC = b"A3LN"
VERSION = 1


class TensorFileError(ValueError):
    pass


class FormatError(TensorFileError):
    """Bad magic, unsupported version or malformed structure."""


class TruncatedFileError(TensorFileError):
    pass


class IntegrityError(TensorFileError):
    """Content digest does not match."""


def _str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_records(records):
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr, dtype="<f4")
        buf.write(_str(name))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def dumps(kind, meta, records, footer=b""):
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<I", VERSION))
    body.write(_str(kind))
    body.write(struct.pack("<I", len(meta)))
    for k, v in meta.items():
        body.write(_str(str(k)))
        body.write(_str(str(v)))
    body.write(encode_records(records))
    body.write(struct.pack("<I", len(footer)))
    body.write(footer)
    payload = body.getvalue()
    return payload + hashlib.sha256(payload).digest()


class Reader:
    def __init__(self, data, pos=0):
        self.data = data
        self.pos = pos

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"unexpected end of data at byte {self.pos} (+{n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def str(self):
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 string at byte {self.pos}") from exc

    def records(self):
        out = {}
        for _ in range(self.u32()):
            name = self.str()
            rank = self.u32()
            if rank > 8:
                raise FormatError(f"record {name!r}: implausible rank {rank}")
            shape = tuple(self.u64() for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = self.take(4 * count)
            if name in out:
                raise FormatError(f"duplicate record {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        return out


def loads(data):
    """Parse bytes into ``(kind, meta, records, footer)``."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic: not a named-tensor file")
    r = Reader(data, 4)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (expected {VERSION})")
    kind = r.str()
    meta = {}
    for _ in range(r.u32()):
        key = r.str()
        meta[key] = r.str()
    records = r.records()
    footer = r.take(r.u32())
    digest = r.take(32)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after digest")
    if hashlib.sha256(data[:-32]).digest() != digest:
        raise IntegrityError("content digest mismatch: file is corrupted")
    return kind, meta, records, footer


def save(path, kind, meta, records, footer=b""):
    with open(path, "wb") as fh:
        fh.write(dumps(kind, meta, records, footer))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
