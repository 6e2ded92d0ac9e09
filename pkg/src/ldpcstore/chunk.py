"""Self-describing chunk layout: a 36-byte little-endian header, then the payload.

    offset  size  field
    0       8     magic b"LDPCSTO1"
    8       8     file_size (u64)
    16      4     n (u32)
    20      4     m (u32)
    24      4     index (u32)
    28      8     graph fingerprint (u64)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"LDPCSTO1"
HEADER = struct.Struct("<8sQIIIQ")
HEADER_SIZE = HEADER.size
assert HEADER_SIZE == 36


class ChunkFormatError(ValueError):
    pass


def chunk_len(file_size: int, n: int) -> int:
    """Payload length of every chunk: ceil(file_size / n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if file_size < 0:
        raise ValueError("file_size must be >= 0")
    return -(-file_size // n)


@dataclass(frozen=True)
class ChunkHeader:
    file_size: int
    n: int
    m: int
    index: int
    graph_fp: int

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.file_size, self.n, self.m, self.index, self.graph_fp)

    @classmethod
    def unpack(cls, data: bytes) -> "ChunkHeader":
        if len(data) < HEADER_SIZE:
            raise ChunkFormatError(f"chunk shorter than the {HEADER_SIZE}-byte header")
        magic, size, n, m, index, fp = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ChunkFormatError("bad chunk magic")
        hdr = cls(size, n, m, index, fp)
        if n < 1 or index >= n + m:
            raise ChunkFormatError(f"chunk index {index} out of range for n={n}, m={m}")
        return hdr

    @property
    def payload_len(self) -> int:
        return chunk_len(self.file_size, self.n)

    def same_file(self, other: "ChunkHeader") -> bool:
        return (self.file_size, self.n, self.m, self.graph_fp) == (other.file_size, other.n, other.m, other.graph_fp)


def build_chunk(header: ChunkHeader, payload: bytes) -> bytes:
    if len(payload) != header.payload_len:
        raise ChunkFormatError(f"payload is {len(payload)} bytes, header implies {header.payload_len}")
    return header.pack() + payload


def parse_chunk(data: bytes) -> tuple[ChunkHeader, bytes]:
    """Validate a whole stored chunk and split it into header and payload."""
    hdr = ChunkHeader.unpack(data)
    payload = data[HEADER_SIZE:]
    if len(payload) != hdr.payload_len:
        raise ChunkFormatError(f"payload is {len(payload)} bytes, header implies {hdr.payload_len}")
    return hdr, payload


def split_file(data: bytes, n: int) -> list[bytes]:
    """n data blocks of chunk_len bytes each, the tail zero-padded."""
    size = chunk_len(len(data), n)
    blocks = []
    for i in range(n):
        part = data[i * size:(i + 1) * size]
        blocks.append(part + bytes(size - len(part)))
    return blocks


def join_blocks(blocks: list[bytes], file_size: int) -> bytes:
    return b"".join(blocks)[:file_size]
