"""SQNT checkpoint container.

Layout, all integers little-endian::

    b"SQNT" | version u16 | tensor count u32
    per tensor:
        name length u32 | name UTF-8
        rows u32 | cols u32 | bits u8 | group_size u32
        bits in {3,4,8}: scales f32[G] | zero_points f32[G] | packed codes
        bits == 32:      values f32[rows*cols]        (full-precision tag, group_size 0)
        zero padding to the next 8-byte file offset

Tensors are written in the order given; names must be unique.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .packing import packed_size
from .tensor_quant import QuantizedTensor, QuantSpec

MAGIC = b"SQNT"
VERSION = 1
FP32_TAG = 32

__all__ = ["MAGIC", "VERSION", "FP32_TAG", "dumps", "loads", "save", "load"]


def _pad8(buf: io.BytesIO) -> None:
    rem = buf.tell() % 8
    if rem:
        buf.write(b"\0" * (8 - rem))


def dumps(tensors: dict) -> bytes:
    """Serialize ``{name: QuantizedTensor | array}``; arrays are stored as FP32."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        if isinstance(t, QuantizedTensor):
            rows, cols = t.shape
            buf.write(struct.pack("<IIBI", rows, cols, t.spec.bits, t.spec.group_size))
            buf.write(np.asarray(t.scales, dtype="<f4").tobytes())
            buf.write(np.asarray(t.zero_points, dtype="<f4").tobytes())
            buf.write(t.codes)
        else:
            a = np.asarray(t, dtype=np.float64)
            if a.ndim == 1:
                a = a[None, :]
            if a.ndim != 2:
                raise ValidationError(f"tensor {name!r}: only 1-D/2-D arrays are supported")
            rows, cols = a.shape
            buf.write(struct.pack("<IIBI", rows, cols, FP32_TAG, 0))
            buf.write(a.astype("<f4").tobytes())
        _pad8(buf)
    return buf.getvalue()


def _take(data: memoryview, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(data):
        raise ValidationError("truncated SQNT file")
    return bytes(data[pos:pos + n]), pos + n


def loads(data: bytes) -> dict:
    """Parse an SQNT blob into ``{name: QuantizedTensor | float64 array}``.

    Full-precision tensors come back with shape ``(rows, cols)``.
    """
    mv = memoryview(data)
    magic, pos = _take(mv, 0, 4)
    if magic != MAGIC:
        raise ValidationError(f"bad magic {magic!r}, not an SQNT file")
    head, pos = _take(mv, pos, 6)
    version, count = struct.unpack("<HI", head)
    if version != VERSION:
        raise ValidationError(f"unsupported SQNT version {version}")
    out: dict = {}
    for _ in range(count):
        size, pos = _take(mv, pos, 4)
        raw, pos = _take(mv, pos, struct.unpack("<I", size)[0])
        name = raw.decode("utf-8")
        if name in out:
            raise ValidationError(f"duplicate tensor name {name!r}")
        hdr, pos = _take(mv, pos, 13)
        rows, cols, bits, group_size = struct.unpack("<IIBI", hdr)
        numel = rows * cols
        if bits == FP32_TAG:
            vals, pos = _take(mv, pos, 4 * numel)
            out[name] = np.frombuffer(vals, dtype="<f4").astype(np.float64).reshape(rows, cols)
        else:
            spec = QuantSpec(bits=bits, group_size=group_size)
            g = -(-numel // group_size)
            s, pos = _take(mv, pos, 4 * g)
            z, pos = _take(mv, pos, 4 * g)
            codes, pos = _take(mv, pos, packed_size(numel, bits))
            qt = QuantizedTensor(
                shape=(rows, cols),
                codes=codes,
                scales=np.frombuffer(s, dtype="<f4").astype(np.float64),
                zero_points=np.frombuffer(z, dtype="<f4").astype(np.float64),
                spec=spec,
            )
            qt.unpacked_codes()  # validates pad bits
            out[name] = qt
        pos += (-pos) % 8
    return out


def save(path, tensors: dict) -> int:
    data = dumps(tensors)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> dict:
    return loads(Path(path).read_bytes())
