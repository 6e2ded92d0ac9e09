"""File-level client: split, encode and spread a file; fetch and rebuild it.

Reads fetch the n data chunks first. Only when some are missing does the
client ask :func:`plan_recovery` for the fewest coding chunks that make the
set peel-decodable, fetch those, and re-plan if any of them fail too.
"""

from __future__ import annotations

import functools
import itertools
import logging
import random
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import wire
from .chunk import HEADER_SIZE, ChunkFormatError, ChunkHeader, build_chunk, chunk_len, parse_chunk, split_file
from .codec import NotDecodable, TannerGraph, compute_fmax, encode, peel_buffers, peel_known
from .config import Config, ConfigError
from .membership import HostList, bootstrap
from .placement import ChunkName, HashRing, format_id, placement_plan, validate_file_name

log = logging.getLogger(__name__)

DEFAULT_PARALLELISM = 8
CLIENT_KEYS = {"seeds", "graph_file", "parallelism", "timeout_ms", "manifest_dir", "hosts_file",
               "bootstrap_quorum", "retries"}


class ClientError(Exception):
    pass


class NotFound(ClientError, LookupError):
    pass


class TooManyUploadFailures(ClientError):
    def __init__(self, manifest: "FileManifest", budget: int):
        self.manifest = manifest
        lost = manifest.discarded
        super().__init__(f"{len(lost)} chunks could not be stored ({lost}); at most {budget} may be lost")


class Infeasible(NotDecodable):
    pass


@functools.lru_cache(maxsize=64)
def _fmax(graph: TannerGraph) -> int:
    return compute_fmax(graph)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class FileManifest:
    file: str
    size: int
    n: int
    m: int
    graph_fp: int
    chunks: list[tuple[int, str, int]] = field(default_factory=list)  # (index, stored|discarded, host id)

    @property
    def discarded(self) -> list[int]:
        return [i for i, state, _ in self.chunks if state == "discarded"]

    @property
    def stored(self) -> list[int]:
        return [i for i, state, _ in self.chunks if state == "stored"]

    def to_text(self) -> str:
        lines = [f"file={self.file}", f"size={self.size}", f"n={self.n}", f"m={self.m}",
                 f"graph_fp={format_id(self.graph_fp)}"]
        lines += [f"chunk {i} {state} {format_id(h)}" for i, state, h in self.chunks]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "FileManifest":
        lines = text.splitlines()
        fields = {}
        for line in lines[:5]:
            key, _, value = line.partition("=")
            fields[key] = value
        try:
            man = cls(fields["file"], int(fields["size"]), int(fields["n"]), int(fields["m"]),
                      int(fields["graph_fp"], 16))
            for line in lines[5:]:
                tag, idx, state, host = line.split()
                if tag != "chunk" or state not in ("stored", "discarded"):
                    raise ValueError(line)
                man.chunks.append((int(idx), state, int(host, 16)))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed manifest: {exc}") from None
        return man

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.file}.manifest"
        path.write_text(self.to_text())
        return path


@dataclass(frozen=True)
class ChunkPlanEntry:
    name: ChunkName
    host: int
    role: str


def chunk_plan(file: str, graph: TannerGraph, hosts: Iterable[int]) -> list[ChunkPlanEntry]:
    plan = placement_plan(file, graph.n, graph.m, hosts)
    return [ChunkPlanEntry(c, h, "data" if c.index < graph.n else "coding") for c, h in plan]


# ---------------------------------------------------------------------------
# recovery planning


def plan_recovery(graph: TannerGraph, missing: Iterable[int], available: Iterable[int]) -> list[int]:
    """Fewest available coding blocks that make the data set peel-decodable.

    ``missing`` are data indices that could not be fetched; every other data
    block counts as present. ``available`` lists block indices believed
    fetchable; only its coding members (>= n) are considered. Sizes are tried
    in increasing order and, within a size, lexicographically, so the answer
    is a minimum and deterministic. Above 16 candidates a greedy pass is used.
    """
    n = graph.n
    full = (1 << n) - 1
    missing = set(missing)
    have = full & ~sum(1 << i for i in missing)
    if not missing:
        return []
    candidates = sorted(i for i in set(available) if n <= i < graph.size)

    def decodes(subset) -> bool:
        mask = have
        for i in subset:
            mask |= 1 << i
        return peel_known(graph, mask) == full

    if not decodes(candidates):
        mask = have | sum(1 << i for i in candidates)
        raise Infeasible(set(range(n)) - _bits(peel_known(graph, mask)))
    if len(candidates) <= 16:
        for k in range(1, len(candidates) + 1):
            for subset in itertools.combinations(candidates, k):
                if decodes(subset):
                    return list(subset)
    chosen: list[int] = []
    rest = list(candidates)
    while not decodes(chosen):
        gains = [(bin(peel_known(graph, have | sum(1 << i for i in chosen + [c]))).count("1"), -c) for c in rest]
        best = rest[max(range(len(rest)), key=lambda k: gains[k])]
        chosen.append(best)
        rest.remove(best)
    # drop anything the greedy pass did not need
    for c in sorted(chosen, reverse=True):
        trial = [x for x in chosen if x != c]
        if decodes(trial):
            chosen = trial
    return sorted(chosen)


def _bits(mask: int) -> set[int]:
    out, i = set(), 0
    while mask:
        if mask & 1:
            out.add(i)
        mask >>= 1
        i += 1
    return out


# ---------------------------------------------------------------------------
# assembling a file from fetched chunks


class ChunkMissing(Exception):
    """A single chunk could not be obtained; ``not_found`` when the host said so."""

    def __init__(self, index: int, not_found: bool, reason: str = ""):
        super().__init__(f"chunk {index}: {reason or ('not found' if not_found else 'unreachable')}")
        self.index = index
        self.not_found = not_found


@dataclass
class GetStats:
    fetched: list[int] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)
    missing_data: list[int] = field(default_factory=list)
    xors: int = 0
    file_size: int = 0


def _serial_map(fn, items):
    return [fn(i) for i in items]


def assemble(
    graph: TannerGraph,
    fetch: Callable[[int], bytes],
    mapper: Callable = _serial_map,
    expected_size: int | None = None,
    out=None,
) -> tuple[bytearray | memoryview, GetStats]:
    """Rebuild a file from its chunks.

    ``fetch(index)`` returns the raw stored chunk (header + payload) or
    raises :class:`ChunkMissing`. ``mapper(fn, indices)`` runs fetches,
    possibly in parallel. Chunks whose header disagrees with the graph or
    with the majority file size are treated as missing.

    With ``out`` (a writable buffer of at least n * chunk length bytes) the
    file is rebuilt in place and a memoryview of it is returned; otherwise
    a new bytearray is.
    """
    n = graph.n
    fp = graph.fingerprint
    stats = GetStats()
    blobs: dict[int, tuple[ChunkHeader, bytes]] = {}
    failed: set[int] = set()
    not_found: set[int] = set()

    def attempt(i: int):
        try:
            hdr, payload = parse_chunk(memoryview(fetch(i)))
        except ChunkMissing as exc:
            return i, None, exc.not_found
        except ChunkFormatError:
            return i, None, False
        if hdr.index != i or hdr.n != n or hdr.m != graph.m or hdr.graph_fp != fp:
            return i, None, False
        return i, (hdr, payload), False

    def run(indices):
        for i, got, nf in mapper(attempt, list(indices)):
            if got is None:
                failed.add(i)
                if nf:
                    not_found.add(i)
            else:
                blobs[i] = got
                stats.fetched.append(i)

    def consistent() -> dict[int, bytes]:
        if not blobs:
            return {}
        size = expected_size
        if size is None:
            size = Counter(h.file_size for h, _ in blobs.values()).most_common(1)[0][0]
        for i, (h, _) in list(blobs.items()):
            if h.file_size != size:
                del blobs[i]
                failed.add(i)
                stats.fetched.remove(i)
        stats.file_size = size
        return {i: p for i, (_, p) in blobs.items()}

    run(range(n))
    have = consistent()
    missing = [i for i in range(n) if i not in have]
    stats.missing_data = missing
    probed = False
    while missing:
        candidates = [i for i in range(n, graph.size) if i not in failed]
        try:
            plan = plan_recovery(graph, missing, list(have) + candidates)
        except Infeasible as exc:
            if not blobs and not probed:
                # tell "file absent" apart from "file damaged"
                probed = True
                run([i for i in range(graph.size) if i not in failed])
                if not blobs and not_found == failed:
                    stats.failed = sorted(failed)
                    raise NotFound("no chunk of the file exists") from None
                have = consistent()
                missing = [i for i in range(n) if i not in have]
                continue
            stats.failed = sorted(failed)
            raise NotDecodable(exc.missing, f"cannot reconstruct data chunks {exc.missing}; "
                                            f"unavailable chunks {sorted(failed)}") from None
        todo = [i for i in plan if i not in have]
        if not todo:
            break
        run(todo)
        have = consistent()
        # untried candidates may be needed if a planned one failed; loop re-plans
        if all(i in have for i in plan):
            break
    stats.failed = sorted(failed)
    # every data block lands directly in its slot of one output buffer, so
    # a read allocates the same way however many blocks need recovering
    length = len(next(iter(have.values())))
    buf = bytearray(n * length) if out is None else out
    view = memoryview(buf).cast("B")
    if len(view) < n * length:
        raise ValueError(f"output buffer holds {len(view)} bytes, need {n * length}")
    stats.xors = peel_buffers(graph, have, [view[i * length:(i + 1) * length] for i in range(n)])[1]
    if out is not None:
        return view[:stats.file_size], stats
    view.release()
    del buf[stats.file_size:]
    return buf, stats


# ---------------------------------------------------------------------------
# network client


@dataclass
class ClientConfig:
    seeds: list[str]
    graph_file: Path | None = None
    parallelism: int = DEFAULT_PARALLELISM
    timeout: float = wire.DEFAULT_TIMEOUT
    manifest_dir: Path = Path("manifests")
    hosts_file: Path | None = None
    bootstrap_quorum: int = 1
    retries: int = 1

    @classmethod
    def from_config(cls, cfg: Config) -> "ClientConfig":
        cfg.check_keys(CLIENT_KEYS)
        seeds = cfg.get_list("seeds")
        if not seeds:
            raise ConfigError("client config needs at least one seed")
        return cls(
            seeds=seeds,
            graph_file=cfg.resolve_path("graph_file"),
            parallelism=cfg.get_int("parallelism", DEFAULT_PARALLELISM),
            timeout=cfg.get_int("timeout_ms", int(wire.DEFAULT_TIMEOUT * 1000)) / 1000.0,
            manifest_dir=cfg.resolve_path("manifest_dir", "manifests"),
            hosts_file=cfg.resolve_path("hosts_file"),
            bootstrap_quorum=cfg.get_int("bootstrap_quorum", 1),
            retries=cfg.get_int("retries", 1),
        )


class Client:
    """Copy files in and out of the store. One operation at a time per instance."""

    def __init__(self, config: ClientConfig, graph: TannerGraph, hosts: HostList | None = None):
        self.config = config
        self.graph = graph
        self._hosts = hosts
        self._refresh_lock = threading.Lock()
        self._refreshed_at = -1.0

    # -- host list --------------------------------------------------------

    def _persisted(self) -> HostList | None:
        path = self.config.hosts_file
        if path is not None and path.exists():
            try:
                return HostList.load(path)
            except (OSError, ValueError):
                return None
        return None

    def refresh_hosts(self) -> HostList:
        fetch = functools.partial(wire.get_hosts, timeout=self.config.timeout)
        hosts = bootstrap(self.config.seeds, fetch, self._persisted(), self.config.bootstrap_quorum)
        self._hosts = hosts
        if self.config.hosts_file is not None:
            try:
                hosts.save(self.config.hosts_file)
            except OSError as exc:
                log.warning("cannot persist host list: %s", exc)
        return hosts

    @property
    def hosts(self) -> HostList:
        if self._hosts is None:
            self.refresh_hosts()
        return self._hosts

    def _refresh_once(self, since: float) -> None:
        # concurrent failures within one operation share a single refresh
        with self._refresh_lock:
            if self._refreshed_at >= since:
                return
            try:
                self.refresh_hosts()
            except ConnectionError as exc:
                log.warning("host list refresh failed: %s", exc)
            self._refreshed_at = time.monotonic()

    def _ring(self) -> tuple[HashRing, HostList]:
        hosts = self.hosts
        return HashRing(hosts.alive()), hosts

    def _executor_map(self):
        pool = ThreadPoolExecutor(max_workers=max(1, self.config.parallelism))
        return pool, lambda fn, items: list(pool.map(fn, items))

    # -- put --------------------------------------------------------------

    def put_file(self, local: str | Path, name: str) -> FileManifest:
        validate_file_name(name)
        try:
            data = Path(local).read_bytes()
        except OSError as exc:
            raise ClientError(f"cannot read {local}: {exc}") from None
        return self.put_bytes(data, name)

    def put_bytes(self, data: bytes, name: str) -> FileManifest:
        validate_file_name(name)
        g = self.graph
        blocks = split_file(data, g.n)
        blocks += encode(g, blocks)
        fp = g.fingerprint
        ring, hosts = self._ring()
        plan = chunk_plan(name, g, ring.ids)
        manifest = FileManifest(name, len(data), g.n, g.m, fp)

        def upload(entry: ChunkPlanEntry) -> tuple[int, str, int]:
            i = entry.name.index
            body = build_chunk(ChunkHeader(len(data), g.n, g.m, i, fp), blocks[i])
            try:
                wire.put_chunk(hosts.address_of(entry.host), entry.name, body, timeout=self.config.timeout)
            except (ConnectionError, wire.RemoteError, OSError) as exc:
                log.info("upload of %s failed: %s", entry.name, exc)
                return i, "discarded", entry.host
            return i, "stored", entry.host

        pool, mapper = self._executor_map()
        with pool:
            manifest.chunks = sorted(mapper(upload, plan))
        manifest.save(self.config.manifest_dir)
        budget = g.size - _fmax(g)
        if len(manifest.discarded) > budget:
            raise TooManyUploadFailures(manifest, budget)
        return manifest

    # -- get --------------------------------------------------------------

    def _fetch_chunk(self, name: str, index: int, started: float) -> bytes:
        chunk = ChunkName(name, index)
        partial = b""
        for attempt in range(self.config.retries + 1):
            ring, hosts = self._ring()
            address = hosts.address_of(ring.owner(chunk))
            try:
                if partial:
                    rest = wire.get_chunk(address, chunk, start=len(partial), timeout=self.config.timeout)
                    return partial + rest
                return wire.get_chunk(address, chunk, timeout=self.config.timeout)
            except wire.ChunkNotFound:
                if attempt == self.config.retries:
                    raise ChunkMissing(index, True) from None
            except wire.TransferError as exc:
                partial += exc.partial
                if attempt == self.config.retries:
                    raise ChunkMissing(index, False, str(exc)) from None
            except (wire.RemoteError, OSError) as exc:
                if attempt == self.config.retries:
                    raise ChunkMissing(index, False, str(exc)) from None
            self._refresh_once(started)
        raise AssertionError("unreachable")

    def get_bytes(self, name: str) -> tuple[bytes, GetStats]:
        validate_file_name(name)
        started = time.monotonic()
        pool, mapper = self._executor_map()
        with pool:
            return assemble(self.graph, lambda i: self._fetch_chunk(name, i, started), mapper)

    def get_file(self, name: str, output: str | Path) -> GetStats:
        data, stats = self.get_bytes(name)
        out = Path(output)
        tmp = out.with_name(out.name + ".part")
        tmp.write_bytes(data)
        tmp.replace(out)
        return stats


def put_file(local: str | Path, name: str, hosts: HostList, graph: TannerGraph, config: ClientConfig | None = None) -> FileManifest:
    config = config or ClientConfig(seeds=hosts.alive_addresses())
    return Client(config, graph, hosts).put_file(local, name)


def get_file(name: str, output: str | Path, hosts: HostList, graph: TannerGraph, config: ClientConfig | None = None) -> GetStats:
    config = config or ClientConfig(seeds=hosts.alive_addresses())
    return Client(config, graph, hosts).get_file(name, output)


# ---------------------------------------------------------------------------
# decode benchmark


@dataclass
class BenchResult:
    missing: int
    trials: int
    file_size: int
    mean_seconds: float
    rate_mb_s: float
    xors: int


def decode_benchmark(file_size: int, graph: TannerGraph, missing_count: int, trials: int = 50,
                     seed: int = 0, data: bytes | None = None, warmup: int = 1) -> BenchResult:
    """Time full reads from an in-memory chunk source with data chunks withheld.

    Every trial copies each fetched chunk from the source into a receive
    buffer (standing in for the transfer), runs recovery planning and
    peeling, and assembles the file. Receive and output buffers are
    allocated once per run: fresh large allocations cost page faults whose
    size depends on allocator state, and that noise would swamp the decode
    cost being measured. ``warmup`` untimed trials run first.
    """
    budget = graph.size - _fmax(graph)
    if not 0 <= missing_count <= min(budget, graph.n):
        raise ValueError(f"missing_count must be within [0, {min(budget, graph.n)}]")
    rng = random.Random(seed)
    if data is None:
        data = np.random.default_rng(seed ^ 0x5EED).bytes(file_size)
    blocks = split_file(data, graph.n)
    blocks += encode(graph, blocks)
    fp = graph.fingerprint
    source = [bytearray(build_chunk(ChunkHeader(len(data), graph.n, graph.m, i, fp), b)) for i, b in enumerate(blocks)]
    del blocks
    received = [bytearray(len(c)) for c in source]
    output = bytearray(graph.n * (len(source[0]) - HEADER_SIZE))

    elapsed = 0.0
    xors = 0
    for trial in range(-warmup, trials):
        withheld = set(rng.sample(range(graph.n), missing_count))

        def fetch(i: int) -> memoryview:
            if i in withheld:
                raise ChunkMissing(i, True)
            received[i][:] = source[i]
            return memoryview(received[i])

        t0 = time.perf_counter()
        out, stats = assemble(graph, fetch, out=output)
        if trial < 0:
            continue
        elapsed += time.perf_counter() - t0
        xors += stats.xors
        if len(out) != len(data):
            raise AssertionError("benchmark read returned the wrong size")
    mean = elapsed / trials
    return BenchResult(missing_count, trials, len(data), mean, len(data) / 1e6 / mean if mean > 0 else float("inf"), xors)


def decode_sweep(file_size: int, graph: TannerGraph, missing_counts: Iterable[int], trials: int = 50,
                 seed: int = 0, data: bytes | None = None) -> list[BenchResult]:
    """Run :func:`decode_benchmark` for each missing count on the same file.

    One full untimed pass goes first. On fresh processes (and freshly
    booted VMs) the first few hundred MB of large allocations are markedly
    slower, which otherwise skews whichever count is measured first.
    """
    counts = list(missing_counts)
    if data is None:
        data = np.random.default_rng(seed ^ 0x5EED).bytes(file_size)
    if counts:
        decode_benchmark(len(data), graph, counts[0], trials, seed, data)
    return [decode_benchmark(len(data), graph, k, trials, seed + k, data) for k in counts]
