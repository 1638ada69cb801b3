"""Bit-exact packing of low-bit integer codes into bytes.

Codes are laid out as a little-endian bit stream: code ``i`` occupies stream
bits ``[i*bits, (i+1)*bits)``, least significant bit first, and stream bit
``k`` is bit ``k % 8`` of byte ``k // 8``. Eight 3-bit codes therefore fill
exactly three bytes, two 4-bit codes one byte. Trailing pad bits are zero.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

__all__ = ["pack_codes", "unpack_codes", "packed_size"]


def packed_size(count: int, bits: int) -> int:
    """Number of bytes needed for ``count`` codes of width ``bits``."""
    return (count * bits + 7) // 8


def _check_bits(bits: int) -> None:
    if not 1 <= bits <= 8:
        raise ValidationError(f"bits must be in [1, 8], got {bits}")


def pack_codes(codes, bits: int) -> bytes:
    _check_bits(bits)
    codes = np.asarray(codes)
    if codes.ndim != 1:
        codes = codes.reshape(-1)
    if codes.size and not np.issubdtype(codes.dtype, np.integer):
        raise ValidationError(f"codes must be integers, got dtype {codes.dtype}")
    codes = codes.astype(np.int64, copy=False)
    bad = np.flatnonzero((codes < 0) | (codes >= (1 << bits)))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(
            f"code {int(codes[i])} at index {i} does not fit in {bits} bits"
        )
    if bits == 8:
        return codes.astype(np.uint8).tobytes()
    shifts = np.arange(bits, dtype=np.int64)
    stream = ((codes[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(stream, bitorder="little").tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; rejects short buffers and nonzero pad bits."""
    _check_bits(bits)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    need = packed_size(count, bits)
    if buf.size != need:
        raise ValidationError(
            f"expected {need} bytes for {count} {bits}-bit codes, got {buf.size}"
        )
    if bits == 8:
        return buf.astype(np.int64)
    stream = np.unpackbits(buf, bitorder="little")
    if stream[count * bits:].any():
        raise ValidationError("corrupted packing: nonzero pad bits after last code")
    chunks = stream[: count * bits].reshape(count, bits).astype(np.int64)
    return chunks @ (np.int64(1) << np.arange(bits, dtype=np.int64))
