"""Bitstream container: header plus length-prefixed, CRC-protected chunks.

Layout is normative and documented in docs/bitstream.md. Header flags fully
determine decoder configuration; decoding refuses unknown versions and
flag/model mismatches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .rangecoder import StreamCorruptError, pack_chunk, unpack_chunk

MAGIC = b"LHBD"
VERSION = 1

MASK_LEARNED = "learned"
MASK_AVERAGE = "average"

_SUBSAMPLE_CODES = {1: 0, 2: 1, 4: 2}
_SUBSAMPLE_VALUES = {v: k for k, v in _SUBSAMPLE_CODES.items()}


@dataclass
class StreamHeader:
    width: int
    height: int
    gop_size: int
    lambda_id: int
    frame_count: int
    subsample_factor: int = 4
    temporal_prediction: bool = True
    context_model: bool = False
    mask_mode: str = MASK_LEARNED

    def flags_byte(self) -> int:
        if self.subsample_factor not in _SUBSAMPLE_CODES:
            raise ValueError(f"unsupported subsample factor {self.subsample_factor}")
        b = _SUBSAMPLE_CODES[self.subsample_factor]
        b |= int(self.temporal_prediction) << 2
        b |= int(self.context_model) << 3
        b |= int(self.mask_mode == MASK_AVERAGE) << 4
        return b

    @classmethod
    def from_flags_byte(cls, b: int, **kwargs) -> "StreamHeader":
        sub = _SUBSAMPLE_VALUES.get(b & 0x3)
        if sub is None:
            raise StreamCorruptError(f"invalid subsample code {b & 0x3}")
        return cls(
            subsample_factor=sub,
            temporal_prediction=bool(b & 0x4),
            context_model=bool(b & 0x8),
            mask_mode=MASK_AVERAGE if b & 0x10 else MASK_LEARNED,
            **kwargs,
        )


_HEADER_FMT = "<4sBHHBBHB"


def write_bitstream(header: StreamHeader, chunks: list[bytes]) -> bytes:
    """Serialize header and coded-unit chunks in coding order."""
    out = bytearray()
    out += struct.pack(
        _HEADER_FMT, MAGIC, VERSION, header.width, header.height,
        header.gop_size, header.lambda_id, header.frame_count,
        header.flags_byte(),
    )
    out += struct.pack("<I", len(chunks))
    for c in chunks:
        out += pack_chunk(c)
    return bytes(out)


def read_bitstream(data: bytes) -> tuple[StreamHeader, list[bytes]]:
    hsize = struct.calcsize(_HEADER_FMT)
    if len(data) < hsize + 4:
        raise StreamCorruptError("stream too short for header")
    magic, version, width, height, gop_size, lambda_id, frame_count, flags = (
        struct.unpack_from(_HEADER_FMT, data, 0)
    )
    if magic != MAGIC:
        raise StreamCorruptError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StreamCorruptError(f"unknown bitstream version {version}")
    header = StreamHeader.from_flags_byte(
        flags, width=width, height=height, gop_size=gop_size,
        lambda_id=lambda_id, frame_count=frame_count,
    )
    (n_chunks,) = struct.unpack_from("<I", data, hsize)
    chunks = []
    offset = hsize + 4
    for _ in range(n_chunks):
        payload, offset = unpack_chunk(data, offset)
        chunks.append(payload)
    if offset != len(data):
        raise StreamCorruptError("trailing bytes after final chunk")
    return header, chunks
