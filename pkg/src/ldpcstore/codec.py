"""Small systematic LDPC erasure codes.

A code is a bipartite graph between ``n`` data blocks and ``m`` coding
blocks. Coding block ``j`` is the XOR of the data blocks in ``edges[j]``.
Blocks are indexed ``0..n-1`` (data) and ``n..n+m-1`` (coding).

Decoding is peeling only: a coding block with exactly one unknown data
neighbour yields that neighbour by XOR, repeated until nothing changes.
All quality figures (worst-case and average overhead) are relative to
this decoder.
"""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .placement import ring_hash

FMAX_SIZE_LIMIT = 30
TABLE_SIZE_LIMIT = 22


class NotDecodable(Exception):
    """Peeling stalled; ``missing`` lists the data indices still unknown."""

    def __init__(self, missing: Iterable[int], message: str | None = None):
        self.missing = sorted(missing)
        super().__init__(message or f"cannot reconstruct data blocks {self.missing}")


class SizeLimitExceeded(ValueError):
    pass


class GraphFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TannerGraph:
    n: int
    m: int
    edges: tuple[tuple[int, ...], ...]
    masks: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1 or self.m < 0:
            raise ValueError(f"need n >= 1 and m >= 0, got n={self.n} m={self.m}")
        if len(self.edges) != self.m:
            raise ValueError(f"expected {self.m} edge rows, got {len(self.edges)}")
        canon = []
        for j, row in enumerate(self.edges):
            row = tuple(sorted(int(i) for i in row))
            if not row:
                raise ValueError(f"coding node {j} has no edges")
            if len(set(row)) != len(row):
                raise ValueError(f"coding node {j} has duplicate edges")
            if row[0] < 0 or row[-1] >= self.n:
                raise ValueError(f"coding node {j} references a data index outside [0, {self.n})")
            canon.append(row)
        object.__setattr__(self, "edges", tuple(canon))
        object.__setattr__(self, "masks", tuple(sum(1 << i for i in row) for row in canon))

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[Iterable[int]]) -> "TannerGraph":
        return cls(n, len(edges), tuple(tuple(r) for r in edges))

    @property
    def size(self) -> int:
        return self.n + self.m

    @property
    def edge_count(self) -> int:
        return sum(len(r) for r in self.edges)

    def to_text(self) -> str:
        lines = [f"ldpc 1 {self.n} {self.m}"]
        lines += [" ".join(str(i) for i in row) for row in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TannerGraph":
        rows = []
        for raw in text.split("\n"):
            line = raw.split("#", 1)[0].strip()
            if line:
                rows.append(line)
        if not rows:
            raise GraphFormatError("empty graph file")
        head = rows[0].split()
        if len(head) != 4 or head[0] != "ldpc" or head[1] != "1":
            raise GraphFormatError(f"bad header line {rows[0]!r}")
        try:
            n, m = int(head[2]), int(head[3])
            edges = [tuple(int(tok) for tok in r.split()) for r in rows[1:]]
        except ValueError as exc:
            raise GraphFormatError(str(exc)) from None
        if len(edges) != m:
            raise GraphFormatError(f"header says m={m} but {len(edges)} rows follow")
        try:
            return cls(n, m, tuple(edges))
        except ValueError as exc:
            raise GraphFormatError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "TannerGraph":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @property
    def fingerprint(self) -> int:
        """FNV-1a 64 over the canonical text serialisation."""
        return ring_hash(self.to_text().encode("ascii"))


@dataclass(frozen=True)
class CodeMetrics:
    f_max_blocks: int
    f_avg: float
    f_avg_err: float
    samples: int

    def f_max(self, n: int) -> float:
        return self.f_max_blocks / n


# ---------------------------------------------------------------------------
# encoding / decoding


def _as_array(block) -> np.ndarray:
    return np.frombuffer(block, dtype=np.uint8)


# XOR in cache-sized strides: every source is read once per stride while
# the output segment stays hot, instead of streaming the whole block per source.
XOR_STRIDE = 1 << 17


def xor_combine(blocks: Sequence, length: int, out: np.ndarray | None = None) -> np.ndarray:
    """Bytewise XOR of equal-length buffers, into ``out`` or a fresh uint8 array."""
    if out is None:
        out = np.empty(length, dtype=np.uint8)
    arrays = [_as_array(b) for b in blocks]
    if not arrays:
        out.fill(0)
        return out
    for lo in range(0, length, XOR_STRIDE):
        hi = min(lo + XOR_STRIDE, length)
        seg = out[lo:hi]
        if len(arrays) == 1:
            seg[:] = arrays[0][lo:hi]
            continue
        np.bitwise_xor(arrays[0][lo:hi], arrays[1][lo:hi], out=seg)
        for a in arrays[2:]:
            np.bitwise_xor(seg, a[lo:hi], out=seg)
    return out


def xor_blocks(blocks: Sequence[bytes], length: int) -> bytes:
    return xor_combine(blocks, length).tobytes()


def encode(graph: TannerGraph, data_blocks: Sequence[bytes]) -> list[bytes]:
    if len(data_blocks) != graph.n:
        raise ValueError(f"expected {graph.n} data blocks, got {len(data_blocks)}")
    lengths = {len(b) for b in data_blocks}
    if len(lengths) > 1:
        raise ValueError(f"data blocks differ in length: {sorted(lengths)}")
    length = lengths.pop()
    return [xor_blocks([data_blocks[i] for i in row], length) for row in graph.edges]


def _mask_of(indices: Iterable[int]) -> int:
    mask = 0
    for i in indices:
        mask |= 1 << i
    return mask


def peel_known(graph: TannerGraph, have_mask: int) -> int:
    """Data-block mask known after peeling from the blocks in ``have_mask``."""
    n = graph.n
    full = (1 << n) - 1
    known = have_mask & full
    coding = [graph.masks[j] for j in range(graph.m) if have_mask >> (n + j) & 1]
    progress = True
    while progress and known != full:
        progress = False
        for mask in coding:
            unknown = mask & ~known
            if unknown and not unknown & (unknown - 1):
                known |= unknown
                progress = True
    return known


def is_decodable(graph: TannerGraph, have: Iterable[int]) -> bool:
    have = set(have)
    if any(i < 0 or i >= graph.size for i in have):
        raise ValueError("block index out of range")
    return peel_known(graph, _mask_of(have)) == (1 << graph.n) - 1


@dataclass
class DecodeResult:
    data: list[bytes]
    xor_count: int


def peel_buffers(graph: TannerGraph, have: Mapping[int, object], out: Sequence | None = None) -> tuple[list, int]:
    """Zero-copy core of :func:`peel_decode`.

    Accepts any buffers (bytes, memoryview, arrays). Without ``out`` the
    data blocks come back as buffers: inputs are passed through, recovered
    blocks are fresh numpy arrays. With ``out`` (one writable buffer per
    data block) every data block is written into its slot instead and the
    slots are returned. Returns ``(blocks, xor_count)``.
    """
    lengths = {len(b) for b in have.values()}
    if len(lengths) > 1:
        raise ValueError(f"blocks differ in length: {sorted(lengths)}")
    n = graph.n
    data: dict[int, object] = {i: have[i] for i in range(n) if i in have}
    if len(data) < n and not have:
        raise NotDecodable(range(n))
    slots = None
    if out is not None:
        slots = [_as_array(b) for b in out]
        for i, b in data.items():
            slots[i][:] = _as_array(b)
        data = {i: slots[i] for i in data}
    if len(data) == n:
        return [data[i] for i in range(n)], 0
    length = lengths.pop()

    pending = [(graph.edges[j], have[n + j]) for j in range(graph.m) if n + j in have]
    xors = 0
    progress = True
    while progress and len(data) < n:
        progress = False
        remaining = []
        for row, block in pending:
            unknown = [i for i in row if i not in data]
            if len(unknown) == 1:
                u = unknown[0]
                known = [data[i] for i in row if i != u]
                data[u] = xor_combine([block, *known], length, None if slots is None else slots[u])
                xors += len(known)
                progress = True
            elif unknown:
                remaining.append((row, block))
        pending = remaining
    if len(data) < n:
        raise NotDecodable(set(range(n)) - set(data))
    return [data[i] for i in range(n)], xors


def peel_decode(graph: TannerGraph, have: Mapping[int, bytes]) -> DecodeResult:
    """Recover all data blocks from ``have`` (block index -> payload).

    ``xor_count`` counts block-sized XOR operations performed.
    Raises NotDecodable listing the data indices that stay unknown.
    """
    blocks, xors = peel_buffers(graph, have)
    return DecodeResult([b if isinstance(b, bytes) else bytes(b) for b in blocks], xors)


# ---------------------------------------------------------------------------
# quality metrics


def compute_fmax(graph: TannerGraph) -> int:
    """Smallest k such that every k-subset of blocks decodes.

    Decodable sets are upward closed, so it is enough to find the smallest
    number j of missing blocks for which some pattern fails; the answer is
    then n+m-(j-1). The scan stops at the first failing pattern.
    """
    size = graph.size
    if size > FMAX_SIZE_LIMIT:
        raise SizeLimitExceeded(f"n+m={size} exceeds the exhaustive limit of {FMAX_SIZE_LIMIT}")
    witness = find_failing_pattern(graph)
    return size - len(witness) + 1


def find_failing_pattern(graph: TannerGraph, missing_count: int | None = None) -> tuple[int, ...] | None:
    """First (lexicographic) missing-block pattern that does not decode.

    With ``missing_count`` given, only patterns of that size are tried.
    Otherwise sizes 1..m+1 are scanned in order. Losing m+1 blocks leaves
    fewer than n, so the unrestricted scan always returns a pattern.
    """
    size = graph.size
    full = (1 << graph.n) - 1
    all_mask = (1 << size) - 1
    counts = [missing_count] if missing_count is not None else range(1, graph.m + 2)
    for j in counts:
        for missing in itertools.combinations(range(size), j):
            have = all_mask
            for i in missing:
                have &= ~(1 << i)
            if peel_known(graph, have) != full:
                return missing
    return None


def estimate_avg_overhead(graph: TannerGraph, samples: int, rng_seed: int) -> tuple[float, float]:
    """Monte Carlo average overhead over random download orders.

    Returns ``(f_avg, f_avg_err)`` with ``f_avg_err = f_avg / sqrt(samples)``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = random.Random(rng_seed)
    n, size = graph.n, graph.size
    full = (1 << n) - 1
    order = list(range(size))
    total = 0
    for _ in range(samples):
        rng.shuffle(order)
        known = 0
        coding: list[int] = []
        count = 0
        for idx in order:
            count += 1
            if idx < n:
                known |= 1 << idx
            else:
                coding.append(graph.masks[idx - n])
            progress = True
            while progress and known != full:
                progress = False
                for mask in coding:
                    unknown = mask & ~known
                    if unknown and not unknown & (unknown - 1):
                        known |= unknown
                        progress = True
            if known == full:
                break
        total += count
    f_avg = total / samples / n
    return f_avg, f_avg / math.sqrt(samples)


def decodable_table(graph: TannerGraph) -> np.ndarray:
    """Boolean array over all 2**(n+m) availability masks: does it decode?

    Vectorised peeling; bit i of the array index is block i.
    """
    size = graph.size
    if size > TABLE_SIZE_LIMIT:
        raise SizeLimitExceeded(f"n+m={size} exceeds the table limit of {TABLE_SIZE_LIMIT}")
    n = graph.n
    subsets = np.arange(1 << size, dtype=np.int64)
    full = (1 << n) - 1
    known = subsets & full
    avail = [((subsets >> (n + j)) & 1).astype(bool) for j in range(graph.m)]
    masks = [np.int64(mk) for mk in graph.masks]
    while True:
        before = known.copy()
        for j in range(graph.m):
            unknown = masks[j] & ~known
            single = (unknown != 0) & ((unknown & (unknown - 1)) == 0) & avail[j]
            known = np.where(single, known | unknown, known)
        if np.array_equal(before, known):
            break
    return known == full


def exact_avg_overhead(graph: TannerGraph) -> float:
    """Expected overhead over a uniformly random download order, computed exactly.

    E[T] = sum_k P(first k blocks do not decode) and the first k blocks of a
    random order form a uniform k-subset.
    """
    table = decodable_table(graph)
    size = graph.size
    popcount = np.bitwise_count(np.arange(1 << size, dtype=np.uint64))
    expected = 0.0
    for k in range(size + 1):
        sel = popcount == k
        bad = int(np.count_nonzero(~table[sel]))
        expected += bad / math.comb(size, k)
    return expected / graph.n


# ---------------------------------------------------------------------------
# graph generation and search


def generate_graph(n: int, m: int, p: float, rng_seed: int | random.Random) -> TannerGraph:
    if not 0 < p < 1:
        raise ValueError("edge probability must lie strictly between 0 and 1")
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    edges = []
    for _ in range(m):
        row: list[int] = []
        while not row:  # redraw empty rows
            row = [i for i in range(n) if rng.random() < p]
        edges.append(tuple(row))
    return TannerGraph(n, m, tuple(edges))


def _data_degrees(graph: TannerGraph) -> list[int]:
    deg = [0] * graph.n
    for row in graph.edges:
        for i in row:
            deg[i] += 1
    return deg


@dataclass
class SearchResult:
    graph: TannerGraph
    metrics: CodeMetrics
    candidates: int
    ties: int


def search_best_graph(
    n: int,
    m: int,
    p_range: tuple[float, float] = (0.4, 0.6),
    budget: int = 1000,
    rng_seed: int = 0,
    samples: int = 10000,
    tie_break: str = "exact",
    tie_samples: int = 2000,
) -> SearchResult:
    """Random search for the graph with the smallest worst-case overhead.

    Candidates are ranked by f_max_blocks, then average overhead, then
    fingerprint. ``tie_break="exact"`` ranks ties by the exactly computed
    average overhead (n+m <= 22); ``"sampled"`` uses a Monte Carlo estimate
    at ``tie_samples``. The returned metrics carry a fresh Monte Carlo
    estimate at ``samples``.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    lo, hi = p_range
    if not 0 < lo <= hi < 1:
        raise ValueError("p_range must lie inside (0, 1)")
    if tie_break not in ("exact", "sampled"):
        raise ValueError("tie_break must be 'exact' or 'sampled'")
    rng = random.Random(rng_seed)
    size = n + m

    def avg_key(g: TannerGraph) -> float:
        if tie_break == "exact" and size <= TABLE_SIZE_LIMIT:
            return exact_avg_overhead(g)
        return estimate_avg_overhead(g, tie_samples, rng_seed)[0]

    best: tuple[int, float, int] | None = None
    best_graph: TannerGraph | None = None
    ties = 0
    for _ in range(budget):
        p = rng.uniform(lo, hi)
        g = generate_graph(n, m, p, rng)
        if best is not None:
            # only graphs tolerating as many losses as the incumbent can compete
            tolerated = size - best[0]
            if tolerated > 0:
                # losing a data block together with all its coding neighbours is fatal
                if min(_data_degrees(g)) < tolerated:
                    continue
                if find_failing_pattern(g, tolerated) is not None:
                    continue
        k = compute_fmax(g)
        if best is not None and k > best[0]:
            continue
        key = (k, avg_key(g), g.fingerprint)
        if best is not None and k == best[0]:
            ties += 1
        if best is None or key < best:
            best, best_graph = key, g
    assert best_graph is not None
    f_avg, err = estimate_avg_overhead(best_graph, samples, rng_seed)
    metrics = CodeMetrics(best[0], f_avg, err, samples)
    return SearchResult(best_graph, metrics, budget, ties)


def evaluate(graph: TannerGraph, samples: int = 10000, rng_seed: int = 0) -> CodeMetrics:
    k = compute_fmax(graph)
    f_avg, err = estimate_avg_overhead(graph, samples, rng_seed)
    return CodeMetrics(k, f_avg, err, samples)


def deployment_graph() -> TannerGraph:
    """The shipped (8, 6) code, tolerating any three lost chunks."""
    return TannerGraph.load(Path(__file__).with_name("data") / "deployment_8_6.graph")
