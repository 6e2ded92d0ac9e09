"""Chunk naming and hash-ring placement of chunks onto hosts.

Host ids and chunk positions share one 64-bit ring. A chunk belongs to the
first host at or clockwise after the hash of its rendered name.

The hash is 64-bit FNV-1a followed by the murmur3 64-bit finaliser
(all arithmetic mod 2**64)::

    h = 0xcbf29ce484222325            # FNV offset basis
    for byte in data:
        h ^= byte
        h = h * 0x100000001b3         # FNV prime
    h ^= h >> 33
    h = h * 0xff51afd7ed558ccd
    h ^= h >> 33
    h = h * 0xc4ceb9fe1a85ec53
    h ^= h >> 33

Plain FNV-1a barely moves the high bits when only the last byte changes,
so ``file.0`` .. ``file.13`` would sit next to each other on the ring and
pile onto one or two hosts. The finaliser spreads them. The empty input
hashes to ``EMPTY_HASH``, the finalised offset basis. Bytes only, so the
result is endianness independent.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1
FMIX_C1 = 0xFF51AFD7ED558CCD
FMIX_C2 = 0xC4CEB9FE1A85EC53


class EmptyHostSet(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def fmix64(h: int) -> int:
    h ^= h >> 33
    h = (h * FMIX_C1) & MASK64
    h ^= h >> 33
    h = (h * FMIX_C2) & MASK64
    h ^= h >> 33
    return h


def ring_hash(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return fmix64(fnv1a64(data))


EMPTY_HASH = fmix64(FNV_OFFSET_BASIS)


def canonical_address(address: str) -> str:
    """Normalise ``host:port`` to the lowercase form that gets hashed."""
    addr = address.strip().lower()
    host, sep, port = addr.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return f"{host}:{int(port)}"


def host_id(address: str) -> int:
    return ring_hash(canonical_address(address))


def format_id(ident: int) -> str:
    return f"{ident:016x}"


def _valid_file_name(name: str) -> bool:
    return bool(name) and "/" not in name and not any(ord(c) < 32 or ord(c) == 127 for c in name)


@dataclass(frozen=True, order=True)
class ChunkName:
    file: str
    index: int

    def __post_init__(self):
        if not _valid_file_name(self.file):
            raise ValueError(f"invalid file name {self.file!r}")
        if self.index < 0:
            raise ValueError("chunk index must be non-negative")

    def render(self) -> str:
        return f"{self.file}.{self.index}"

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str) -> "ChunkName":
        # the file part may itself contain dots; the index is after the last one
        file, sep, idx = text.rpartition(".")
        if not sep or not idx.isdigit() or (len(idx) > 1 and idx[0] == "0"):
            raise ValueError(f"not a chunk name: {text!r}")
        return cls(file, int(idx))


def validate_file_name(name: str) -> str:
    if not _valid_file_name(name):
        raise ValueError(f"invalid file name {name!r}")
    return name


class HashRing:
    """Sorted host ids with clockwise-successor lookup."""

    def __init__(self, hosts: Iterable[int]):
        self._ids = sorted(set(hosts))
        if not self._ids:
            raise EmptyHostSet("no hosts to place chunks on")

    @property
    def ids(self) -> list[int]:
        return list(self._ids)

    def successor(self, position: int) -> int:
        i = bisect.bisect_left(self._ids, position)
        return self._ids[i % len(self._ids)]

    def owner(self, chunk: ChunkName) -> int:
        return self.successor(ring_hash(chunk.render()))


def responsible_host(chunk: ChunkName, hosts: Iterable[int]) -> int:
    return HashRing(hosts).owner(chunk)


@dataclass
class PlacementPlan:
    entries: list[tuple[ChunkName, int]]

    @property
    def collisions(self) -> bool:
        """True when two chunks of the file land on the same host."""
        owners = [h for _, h in self.entries]
        return len(set(owners)) != len(owners)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


def placement_plan(file: str, n: int, m: int, hosts: Iterable[int]) -> PlacementPlan:
    ring = HashRing(hosts)
    names = [ChunkName(file, i) for i in range(n + m)]
    return PlacementPlan([(c, ring.owner(c)) for c in names])
