"""Single-file binary checkpoint.

Layout (little-endian)::

    b"FETK" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count |
    count x ( u16 name_len | name | u8 kind | u8 dtype_len | dtype str |
              u8 ndim | u64 x ndim shape | raw C-order bytes )

``kind`` is 0 for trainable parameters and 1 for buffers (BatchNorm running
statistics). Arrays round-trip bit-exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataIOError
from .tracker.model import Model, ModelConfig

MAGIC = b"FETK"
VERSION = 1
PARAM, BUFFER = 0, 1


def _pack_array(name, kind, a):
    a = np.ascontiguousarray(a)
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    a = a.astype(dt, copy=False)
    nb = name.encode()
    ds = dt.str.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, len(ds)) + ds
    head += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def save(path, model: Model, meta=None):
    """Write ``model`` (config, params, buffers) plus optional JSON ``meta``."""
    doc = {"config": model.cfg.to_dict(), "meta": meta or {}}
    blob = json.dumps(doc, sort_keys=True).encode()
    items = [(k, PARAM, v) for k, v in sorted(model.params.items())]
    items += [(k, BUFFER, v) for k, v in sorted(model.buffers.items())]
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(items))]
    parts += [_pack_array(*it) for it in items]
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint {path}: {e}") from e


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise DataIOError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path):
    """Returns ``(Model, meta)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise DataIOError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise DataIOError(f"{path}: unsupported checkpoint version {version}")
    try:
        doc = json.loads(r.take(meta_len).decode())
    except ValueError as e:
        raise DataIOError(f"{path}: corrupt metadata ({e})") from e
    (count,) = r.unpack("<I")
    params, buffers = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        kind, dlen = r.unpack("<BB")
        dtype = np.dtype(r.take(dlen).decode())
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).copy()
        (params if kind == PARAM else buffers)[name] = arr
    if r.pos != len(data):
        raise DataIOError(f"{path}: trailing bytes after the last array")
    return Model(ModelConfig.from_dict(doc["config"]), params, buffers), doc.get("meta", {})
