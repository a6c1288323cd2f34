"""The ``UMCK`` checkpoint container.

Layout (all integers little-endian)::

    b"UMCK"  u16 version  u32 record_count
    record*: u16 name_len, name (utf-8), u8 dtype_code, u8 rank, u32 dims[rank], payload
    u32 crc32 over every preceding byte

Payload length is implied by ``dims`` and the dtype size.  Writes go to a
temporary file that is renamed into place.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..optim import AdamState
from .netpbm import atomic_write

MAGIC = b"UMCK"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_CODES = {("f", 4): 1, ("f", 8): 2, ("i", 8): 3, ("u", 1): 4}


def _code_for(arr):
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype} for checkpoint records")
    return _CODES[key]


def encode_container(records) -> bytes:
    """``records`` is a mapping or a sequence of ``(name, array)`` pairs."""
    items = list(records.items()) if hasattr(records, "items") else list(records)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(items))]
    seen = set()
    for name, arr in items:
        if name in seen:
            raise FormatError(f"duplicate record name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        code = _code_for(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_container(buf: bytes, where="<bytes>"):
    if len(buf) < 14:
        raise FormatError(f"{where}: too short to be a checkpoint ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise FormatError(f"{where}: bad magic {buf[:4]!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError(f"{where}: checksum mismatch (file corrupt or truncated)")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise FormatError(f"{where}: container version {version}, this build reads {VERSION}")
    pos = 10
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if code not in DTYPES:
                raise FormatError(f"{where}: unknown dtype code {code} for record {name!r} at byte {pos - 2}")
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dtype = DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(body):
                raise FormatError(f"{where}: record {name!r} payload overruns file at byte {pos}")
            if name in out:
                raise FormatError(f"{where}: duplicate record name {name!r}")
            out[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=pos).reshape(dims).astype(dtype.newbyteorder("="))
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"{where}: malformed record table at byte {pos}: {exc}") from None
    if pos != len(body):
        raise FormatError(f"{where}: {len(body) - pos} trailing bytes after the record table")
    return out


def write_container(path, records):
    atomic_write(path, encode_container(records))


def read_container(path):
    path = Path(path)
    return decode_container(path.read_bytes(), str(path))


def save_checkpoint(path, params, adam: AdamState | None = None, meta=None):
    """Serialize a parameter mapping (plus optional Adam state and metadata).

    ``meta`` maps names to arrays or strings; strings are stored as utf-8
    byte records.
    """
    records = OrderedDict()
    for name, arr in (meta or {}).items():
        if isinstance(arr, str):
            arr = np.frombuffer(arr.encode("utf-8"), dtype=np.uint8)
        records[f"meta/{name}"] = np.asarray(arr)
    for name, arr in params.items():
        records[f"param/{name}"] = arr
    if adam is not None:
        records["adam/step"] = np.asarray(adam.step, dtype=np.int64)
        hyper = [adam.beta1, adam.beta2, adam.eps, adam.weight_decay]
        records["adam/hyper"] = np.asarray(hyper, dtype=np.float64)
        for name, arr in adam.m.items():
            records[f"adam/m/{name}"] = arr
        for name, arr in adam.v.items():
            records[f"adam/v/{name}"] = arr
    write_container(path, records)


def load_checkpoint(path):
    """Returns ``(params, adam_or_None, meta)``; meta byte records are decoded to str."""
    records = read_container(path)
    params, meta = OrderedDict(), {}
    adam = None
    for name, arr in records.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            params[rest] = arr
        elif kind == "meta":
            meta[rest] = arr.tobytes().decode("utf-8") if arr.dtype == np.uint8 else arr
        elif kind == "adam":
            if adam is None:
                adam = AdamState()
            if rest == "step":
                adam.step = int(arr)
            elif rest == "hyper":
                adam.beta1, adam.beta2, adam.eps, adam.weight_decay = (float(v) for v in arr)
            elif rest.startswith("m/"):
                adam.m[rest[2:]] = arr
            elif rest.startswith("v/"):
                adam.v[rest[2:]] = arr
            else:
                raise FormatError(f"{path}: unknown optimizer record {name!r}")
        else:
            raise FormatError(f"{path}: unknown record namespace in {name!r}")
    return params, adam, meta
