"""Byte-oriented renormalizing range coder and chunk framing.

The coder works on integer frequency tables: a symbol is coded from its
(cumulative, frequency, total) triple. Decoding is exact: for any symbol
stream and matching tables, decode(encode(x)) == x. Chunks carry a length
prefix and a CRC32 over the payload.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

_MASK64 = (1 << 64) - 1
_TOP = 1 << 56
_BOT = 1 << 48

MAX_TOTAL = 1 << 16


class StreamCorruptError(Exception):
    """Raised when a chunk fails its checksum or framing checks."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK64
        self.out = bytearray()

    def encode(self, cum: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low = (self.low + r * cum) & _MASK64
        self.range = r * freq
        while True:
            if (self.low ^ (self.low + self.range)) < _TOP:
                pass
            elif self.range < _BOT:
                self.range = (-self.low) & (_BOT - 1)
            else:
                break
            self.out.append((self.low >> 56) & 0xFF)
            self.low = (self.low << 8) & _MASK64
            self.range = (self.range << 8) & _MASK64

    def finish(self) -> bytes:
        """Terminate with the shortest byte string that still decodes.

        The decoder zero-pads past the end of the stream, so it suffices to
        emit the non-zero prefix of any value inside [low, low + range);
        rounding low up to the coarsest byte boundary that stays inside the
        interval maximizes the number of trailing zero bytes dropped.
        """
        hi = self.low + self.range
        for k in range(8, -1, -1):
            step = 1 << (8 * k)
            v = (self.low + step - 1) // step * step
            if v < hi:
                for shift in range(56, 8 * k - 8, -8):
                    self.out.append((v >> shift) & 0xFF)
                return bytes(self.out)
        raise AssertionError("empty coding interval")


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = _MASK64
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        return 0

    def decode_target(self, total: int) -> int:
        r = self.range // total
        t = (self.code - self.low) & _MASK64
        return min(t // r, total - 1)

    def advance(self, cum: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low = (self.low + r * cum) & _MASK64
        self.range = r * freq
        while True:
            if (self.low ^ (self.low + self.range)) < _TOP:
                pass
            elif self.range < _BOT:
                self.range = (-self.low) & (_BOT - 1)
            else:
                break
            self.code = ((self.code << 8) | self._byte()) & _MASK64
            self.low = (self.low << 8) & _MASK64
            self.range = (self.range << 8) & _MASK64


class FrequencyTable:
    """Integer frequency table over symbols 0..n-1 with cumulative lookup."""

    def __init__(self, freqs: np.ndarray):
        freqs = np.asarray(freqs, dtype=np.int64)
        if freqs.ndim != 1 or len(freqs) < 1:
            raise ValueError("freqs must be a non-empty 1-D array")
        if (freqs < 1).any():
            raise ValueError("all frequencies must be >= 1")
        self.freqs = freqs
        self.cum = np.concatenate([[0], np.cumsum(freqs)])
        self.total = int(self.cum[-1])
        if self.total > MAX_TOTAL:
            raise ValueError(f"total {self.total} exceeds {MAX_TOTAL}")

    def __len__(self) -> int:
        return len(self.freqs)

    def symbol_for(self, target: int) -> int:
        return int(np.searchsorted(self.cum, target, side="right")) - 1


def quantize_pmf(pmf: np.ndarray, total: int = MAX_TOTAL) -> np.ndarray:
    """Turn a probability vector into integer frequencies summing to total,
    every entry >= 1."""
    pmf = np.asarray(pmf, dtype=np.float64)
    pmf = np.maximum(pmf, 0.0)
    n = len(pmf)
    if total < n:
        raise ValueError("total too small for the number of symbols")
    mass = pmf.sum()
    if not np.isfinite(mass) or mass <= 0.0:
        raise ValueError("pmf must have positive finite total mass")
    freqs = np.maximum(1, np.round(pmf / mass * (total - n))).astype(np.int64)
    # repair the rounding drift on the largest bin
    drift = total - int(freqs.sum())
    order = np.argsort(freqs)[::-1]
    i = 0
    while drift != 0:
        j = order[i % n]
        step = 1 if drift > 0 else -1
        if freqs[j] + step >= 1:
            freqs[j] += step
            drift -= step
        i += 1
    return freqs


def range_encode(symbols: np.ndarray, tables, table_indices=None) -> bytes:
    """Range-encode integer symbols.

    tables is a single FrequencyTable applied to every symbol, or a list of
    tables selected per symbol by table_indices.
    """
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    enc = RangeEncoder()
    if table_indices is None:
        t = tables
        cum, freqs, total = t.cum, t.freqs, t.total
        for s in symbols:
            enc.encode(int(cum[s]), int(freqs[s]), total)
    else:
        idx = np.asarray(table_indices, dtype=np.int64).ravel()
        if idx.shape != symbols.shape:
            raise ValueError("table_indices must match symbols")
        for s, k in zip(symbols, idx):
            t = tables[k]
            enc.encode(int(t.cum[s]), int(t.freqs[s]), t.total)
    return enc.finish()


def range_decode(data: bytes, tables, count: int, table_indices=None) -> np.ndarray:
    """Inverse of range_encode; returns count decoded symbols."""
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    if table_indices is None:
        t = tables
        for i in range(count):
            s = t.symbol_for(dec.decode_target(t.total))
            dec.advance(int(t.cum[s]), int(t.freqs[s]), t.total)
            out[i] = s
    else:
        idx = np.asarray(table_indices, dtype=np.int64).ravel()
        for i in range(count):
            t = tables[idx[i]]
            s = t.symbol_for(dec.decode_target(t.total))
            dec.advance(int(t.cum[s]), int(t.freqs[s]), t.total)
            out[i] = s
    return out


def write_uvarint(n: int) -> bytes:
    """LEB128 unsigned varint."""
    if n < 0:
        raise ValueError("uvarint must be non-negative")
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def read_uvarint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Read one LEB128 varint at offset; returns (value, next_offset)."""
    n = 0
    shift = 0
    while True:
        if offset >= len(data):
            raise StreamCorruptError("truncated varint")
        b = data[offset]
        offset += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, offset
        shift += 7
        if shift > 63:
            raise StreamCorruptError("varint too long")


def pack_chunk(payload: bytes) -> bytes:
    """Length-prefixed, CRC32-protected byte block."""
    return struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def unpack_chunk(data: bytes, offset: int = 0) -> tuple[bytes, int]:
    """Read one chunk at offset; returns (payload, next_offset)."""
    if offset + 4 > len(data):
        raise StreamCorruptError("truncated chunk header")
    (length,) = struct.unpack_from("<I", data, offset)
    end = offset + 4 + length + 4
    if end > len(data):
        raise StreamCorruptError("truncated chunk payload")
    payload = data[offset + 4:offset + 4 + length]
    (crc,) = struct.unpack_from("<I", data, offset + 4 + length)
    if crc != zlib.crc32(payload):
        raise StreamCorruptError("chunk checksum mismatch")
    return payload, end
