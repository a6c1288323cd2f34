"""Binary NetPBM (P5 gray / P6 RGB) reading and writing.

Images come back as ``float64`` arrays scaled to ``[0, 1]``: ``[3, H, W]``
for PPM, ``[1, H, W]`` for PGM.  Writers default to 16-bit samples.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from ..errors import FormatError

_WS = b" \t\n\r\v\f"


class _Header:
    def __init__(self, magic, width, height, maxval, offset, comments):
        self.magic = magic
        self.width = width
        self.height = height
        self.maxval = maxval
        self.offset = offset
        self.comments = comments


def _parse_header(buf: bytes, where: str) -> _Header:
    if len(buf) < 2:
        raise FormatError(f"{where}: file too short for a NetPBM header (byte 0)")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{where}: bad magic {magic!r} at byte 0 (expected P5 or P6)")
    pos = 2
    fields = []
    comments = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError(f"{where}: truncated header at byte {pos}")
        if buf[pos] in _WS:
            pos += 1
            continue
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"{where}: unterminated comment at byte {pos}")
            comments.append(buf[pos + 1:end].decode("ascii", "replace").strip())
            pos = end + 1
            continue
        start = pos
        while pos < len(buf) and buf[pos] not in _WS and buf[pos:pos + 1] != b"#":
            pos += 1
        token = buf[start:pos]
        if not token.isdigit():
            raise FormatError(f"{where}: expected a decimal number at byte {start}, got {token[:16]!r}")
        fields.append(int(token))
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError(f"{where}: missing whitespace after maxval at byte {pos}")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"{where}: invalid extents {width}x{height}")
    if maxval not in (255, 65535):
        raise FormatError(f"{where}: unsupported maxval {maxval} (255 or 65535 only)")
    return _Header(magic.decode(), width, height, maxval, pos + 1, comments)


def read_netpbm(path, with_comments=False):
    path = Path(path)
    buf = path.read_bytes()
    hdr = _parse_header(buf, str(path))
    channels = 3 if hdr.magic == "P6" else 1
    sample = 1 if hdr.maxval == 255 else 2
    need = hdr.width * hdr.height * channels * sample
    have = len(buf) - hdr.offset
    if have < need:
        raise FormatError(f"{path}: truncated payload at byte {len(buf)}: "
                          f"need {need} bytes after offset {hdr.offset}, have {have}")
    dtype = np.dtype(np.uint8) if sample == 1 else np.dtype(">u2")
    raw = np.frombuffer(buf, dtype=dtype, count=hdr.width * hdr.height * channels, offset=hdr.offset)
    img = raw.reshape(hdr.height, hdr.width, channels).transpose(2, 0, 1).astype(np.float64) / hdr.maxval
    return (img, hdr) if with_comments else img


def _read(path, magic, with_comments):
    img, hdr = read_netpbm(path, with_comments=True)
    if hdr.magic != magic:
        raise FormatError(f"{path}: expected {magic} but found {hdr.magic} at byte 0")
    return (img, hdr.comments) if with_comments else img


def read_ppm(path, with_comments=False):
    """RGB image as ``[3, H, W]`` in ``[0, 1]``."""
    return _read(path, "P6", with_comments)


def read_pgm(path, with_comments=False):
    """Gray image as ``[1, H, W]`` in ``[0, 1]``."""
    return _read(path, "P5", with_comments)


def quantize(x, maxval=65535):
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * maxval)


def _encode(img, magic, maxval, comments):
    if maxval not in (255, 65535):
        raise ValueError(f"unsupported maxval {maxval}")
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    q = quantize(img, maxval).transpose(1, 2, 0)
    dtype = np.uint8 if maxval == 255 else ">u2"
    head = magic.encode() + b"\n"
    for line in comments:
        head += b"# " + line.encode("ascii") + b"\n"
    head += f"{w} {h}\n{maxval}\n".encode()
    return head + q.astype(dtype).tobytes()


def atomic_write(path, data: bytes):
    """Write via a unique temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_ppm(path, img, maxval=65535, comments=()):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects [3, H, W], got {img.shape}")
    atomic_write(path, _encode(img, "P6", maxval, comments))


def write_pgm(path, img, maxval=65535, comments=()):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] != 1:
        raise ValueError(f"write_pgm expects [1, H, W], got {img.shape}")
    atomic_write(path, _encode(img, "P5", maxval, comments))
