"""Gossip-maintained host list (rumour mongering with digest pulls).

Every host owns a sequence counter. A record with a higher seq replaces a
lower one; at equal seq ``left`` wins over ``joined`` so that merging is a
join-semilattice (idempotent, commutative, associative). A live host that
hears it has been declared left answers with a fresh ``joined`` at a higher
seq.

The same :class:`GossipAgent` runs inside real nodes (over HTTP) and inside
the simulator (over a virtual transport).
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .placement import canonical_address, format_id, host_id

JOINED = "joined"
LEFT = "left"
_STATUS_RANK = {JOINED: 0, LEFT: 1}

WIRE_MAGIC = "LDPCGOSSIP"
WIRE_VERSION = "1"


class ProtocolError(ValueError):
    pass


class AllSeedsUnreachable(ConnectionError):
    pass


@dataclass
class HostRecord:
    id: int
    address: str
    status: str
    seq: int
    last_heard: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.status not in _STATUS_RANK:
            raise ProtocolError(f"unknown status {self.status!r}")
        if self.seq < 0:
            raise ProtocolError("seq must be non-negative")

    @property
    def rank(self) -> tuple[int, int]:
        return (self.seq, _STATUS_RANK[self.status])

    @property
    def key(self) -> tuple[int, str, str, int]:
        return (self.id, self.address, self.status, self.seq)

    def line(self) -> str:
        return f"{format_id(self.id)} {self.address} {self.status} {self.seq}"

    @classmethod
    def parse(cls, line: str) -> "HostRecord":
        parts = line.split()
        if len(parts) != 4:
            raise ProtocolError(f"bad host record {line!r}")
        ident, address, status, seq = parts
        try:
            rec = cls(int(ident, 16), address, status, int(seq))
        except ValueError as exc:
            raise ProtocolError(f"bad host record {line!r}: {exc}") from None
        if len(ident) != 16 or rec.id != host_id(address):
            raise ProtocolError(f"host id does not match address in {line!r}")
        return rec

    @classmethod
    def for_address(cls, address: str, status: str = JOINED, seq: int = 1) -> "HostRecord":
        address = canonical_address(address)
        return cls(host_id(address), address, status, seq)


@dataclass
class Rumour:
    subject: HostRecord
    hops: int = 0

    def __post_init__(self):
        if self.hops < 0:
            raise ProtocolError("hops must be non-negative")


class HostList:
    def __init__(self, records: Iterable[HostRecord] = ()):
        self.records: dict[int, HostRecord] = {}
        self.version = 0
        for r in records:
            self.merge(r)

    def __len__(self):
        return len(self.records)

    def __contains__(self, ident: int) -> bool:
        return ident in self.records

    def get(self, ident: int) -> HostRecord | None:
        return self.records.get(ident)

    def is_news(self, rec: HostRecord) -> bool:
        cur = self.records.get(rec.id)
        return cur is None or rec.rank > cur.rank

    def merge(self, rec: HostRecord) -> bool:
        """Keep ``rec`` if it dominates the stored record; True when it did."""
        if not self.is_news(rec):
            return False
        self.records[rec.id] = replace(rec)
        self.version += 1
        return True

    def merge_all(self, other: "HostList | Iterable[HostRecord]") -> int:
        recs = other.records.values() if isinstance(other, HostList) else other
        return sum(self.merge(r) for r in list(recs))

    def alive(self) -> list[int]:
        return sorted(i for i, r in self.records.items() if r.status == JOINED)

    def alive_addresses(self) -> list[str]:
        return [self.records[i].address for i in self.alive()]

    def address_of(self, ident: int) -> str:
        return self.records[ident].address

    def digest(self) -> dict[int, tuple[int, int]]:
        return {i: r.rank for i, r in self.records.items()}

    def newer_than(self, digest: dict[int, tuple[int, int]]) -> list[HostRecord]:
        return [r for i, r in sorted(self.records.items()) if i not in digest or r.rank > digest[i]]

    def state(self) -> tuple:
        return tuple(sorted(r.key for r in self.records.values()))

    def copy(self) -> "HostList":
        hl = HostList()
        hl.records = {i: replace(r) for i, r in self.records.items()}
        hl.version = self.version
        return hl

    def serialize(self) -> str:
        return "".join(self.records[i].line() + "\n" for i in sorted(self.records))

    @classmethod
    def parse(cls, text: str) -> "HostList":
        return cls(HostRecord.parse(line) for line in text.splitlines() if line.strip())

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.serialize())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "HostList":
        return cls.parse(Path(path).read_text())


def apply_rumour(hosts: HostList, r: Rumour, rng: random.Random, decay: float = 0.5) -> tuple[HostList, bool]:
    """Merge a rumour; forward it with probability decay**hops if it was news."""
    if not isinstance(r, Rumour) or not isinstance(r.subject, HostRecord):
        raise ProtocolError("malformed rumour")
    news = hosts.merge(r.subject)
    if not news:
        return hosts, False
    return hosts, rng.random() < decay**r.hops


# ---------------------------------------------------------------------------
# wire messages


@dataclass
class GossipMessage:
    kind: str  # push | pull | records
    sender: str
    rumours: list[Rumour] = field(default_factory=list)
    digest: dict[int, tuple[int, int]] = field(default_factory=dict)
    records: list[HostRecord] = field(default_factory=list)

    def encode(self) -> bytes:
        """Header line, entry count, then ``<byte-length> <entry>`` lines."""
        if self.kind == "push":
            entries = [f"{r.subject.line()} {r.hops}" for r in self.rumours]
        elif self.kind == "pull":
            # digest entries have three fields; the puller's own record has four
            entries = [f"{format_id(i)} {seq} {rank}" for i, (seq, rank) in sorted(self.digest.items())]
            entries += [r.line() for r in self.records]
        elif self.kind == "records":
            entries = [r.line() for r in self.records]
        else:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        out = [f"{WIRE_MAGIC} {WIRE_VERSION} {self.kind} {self.sender}", str(len(entries))]
        out += [f"{len(e.encode())} {e}" for e in entries]
        return ("\n".join(out) + "\n").encode()

    @classmethod
    def decode(cls, data: bytes) -> "GossipMessage":
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("gossip body is not utf-8") from None
        lines = text.split("\n")
        if len(lines) < 2:
            raise ProtocolError("truncated gossip message")
        head = lines[0].split(" ")
        if len(head) != 4 or head[0] != WIRE_MAGIC or head[1] != WIRE_VERSION:
            raise ProtocolError(f"bad gossip header {lines[0]!r}")
        kind, sender = head[2], head[3]
        try:
            sender = canonical_address(sender)
            count = int(lines[1])
        except ValueError as exc:
            raise ProtocolError(str(exc)) from None
        body = lines[2:]
        if count < 0 or len(body) < count or any(body[count:]):
            raise ProtocolError("entry count does not match body")
        entries = []
        for raw in body[:count]:
            size, _, entry = raw.partition(" ")
            if not size.isdigit() or int(size) != len(entry.encode()):
                raise ProtocolError(f"length prefix mismatch in {raw!r}")
            entries.append(entry)
        msg = cls(kind, sender)
        try:
            if kind == "push":
                for e in entries:
                    line, _, hops = e.rpartition(" ")
                    msg.rumours.append(Rumour(HostRecord.parse(line), int(hops)))
            elif kind == "pull":
                for e in entries:
                    if e.count(" ") == 3:
                        msg.records.append(HostRecord.parse(e))
                        continue
                    ident, seq, rank = e.split(" ")
                    if len(ident) != 16:
                        raise ProtocolError(f"bad digest id {ident!r}")
                    msg.digest[int(ident, 16)] = (int(seq), int(rank))
            elif kind == "records":
                msg.records = [HostRecord.parse(e) for e in entries]
            else:
                raise ProtocolError(f"unknown message kind {kind!r}")
        except ValueError as exc:
            raise ProtocolError(str(exc)) from None
        return msg


# ---------------------------------------------------------------------------
# per-node protocol state


@dataclass
class GossipConfig:
    fanout: int = 3
    decay: float = 0.5
    t_min: float = 1.0
    t_max: float = 3.0
    miss_threshold: int = 5

    def __post_init__(self):
        if self.fanout < 1:
            raise ValueError("fanout must be >= 1")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must be within [0, 1]")
        if not 0 <= self.t_min <= self.t_max:
            raise ValueError("need 0 <= t_min <= t_max")
        if self.miss_threshold < 1:
            raise ValueError("miss_threshold must be >= 1")


class GossipAgent:
    """Membership state of one host plus the rumour-mongering rules.

    Transport-agnostic: :meth:`round` returns ``(address, message)`` pairs
    to send, :meth:`handle` answers an incoming message, and the caller
    reports outcomes via :meth:`on_reply` / :meth:`on_failure`.
    """

    def __init__(
        self,
        address: str,
        config: GossipConfig | None = None,
        rng: random.Random | None = None,
        hosts: HostList | None = None,
        clock: Callable[[], float] = lambda: 0.0,
    ):
        self.address = canonical_address(address)
        self.id = host_id(self.address)
        self.config = config or GossipConfig()
        self.rng = rng or random.Random()
        self.hosts = hosts.copy() if hosts is not None else HostList()
        self.clock = clock
        self.pending: list[Rumour] = []
        self.misses: dict[int, int] = {}
        self.running = False
        self.messages_sent = 0
        self._lock = threading.RLock()

    # -- lifecycle --------------------------------------------------------

    def _originate(self, status: str, ident: int | None = None, address: str | None = None,
                   above: int = 0) -> HostRecord:
        ident = self.id if ident is None else ident
        cur = self.hosts.get(ident)
        seq = max(cur.seq if cur else 0, above) + 1
        rec = HostRecord(ident, address or (cur.address if cur else self.address), status, seq, self.clock())
        self.hosts.merge(rec)
        self.pending.append(Rumour(replace(rec), 0))
        return rec

    def start(self) -> HostRecord:
        with self._lock:
            self.running = True
            return self._originate(JOINED)

    def leave(self) -> list[tuple[str, GossipMessage]]:
        """Announce a clean departure; returns the final pushes to send."""
        with self._lock:
            self._originate(LEFT)
            out = self._pushes()
            self.running = False
            return out

    def bootstrap_from(self, other: HostList) -> int:
        with self._lock:
            merged = 0
            for rec in other.records.values():
                if rec.id == self.id:
                    self._note_self(rec)
                    continue
                merged += self.hosts.merge(rec)
            return merged

    # -- views ------------------------------------------------------------

    def snapshot(self) -> HostList:
        with self._lock:
            return self.hosts.copy()

    def alive_peers(self) -> list[int]:
        return [i for i in self.hosts.alive() if i != self.id]

    def dead_peers(self) -> list[int]:
        return sorted(i for i, r in self.hosts.records.items() if r.status == LEFT and i != self.id)

    def next_delay(self) -> float:
        return self.rng.uniform(self.config.t_min, self.config.t_max)

    # -- sending ----------------------------------------------------------

    def _pushes(self) -> list[tuple[str, GossipMessage]]:
        if not self.pending:
            return []
        peers = self.alive_peers()
        if not peers:
            self.pending.clear()
            return []
        targets = peers if len(peers) <= self.config.fanout else self.rng.sample(peers, self.config.fanout)
        rumours = [Rumour(replace(r.subject), r.hops + 1) for r in self.pending]
        self.pending.clear()
        return [(self.hosts.address_of(t), GossipMessage("push", self.address, rumours=list(rumours))) for t in targets]

    def _pull(self) -> GossipMessage:
        mine = self.hosts.get(self.id)
        return GossipMessage("pull", self.address, digest=self.hosts.digest(),
                             records=[replace(mine)] if mine is not None else [])

    def round(self) -> list[tuple[str, GossipMessage]]:
        with self._lock:
            if not self.running:
                return []
            out = self._pushes()
            peers = self.alive_peers()
            if peers:
                target = peers[self.rng.randrange(len(peers))]
                out.append((self.hosts.address_of(target), self._pull()))
            # occasionally probe a host believed gone, so healed partitions and
            # wrongly suspected hosts get back in touch
            dead = self.dead_peers()
            if dead and self.rng.random() < len(dead) / (len(peers) + 1):
                target = dead[self.rng.randrange(len(dead))]
                out.append((self.hosts.address_of(target), self._pull()))
            self.messages_sent += len(out)
            return out

    # -- receiving --------------------------------------------------------

    def _note_self(self, rec: HostRecord) -> None:
        self.hosts.merge(rec)
        mine = self.hosts.get(self.id)
        # someone declared us gone while we are up: outbid it
        if self.running and mine is not None and mine.status == LEFT:
            self._originate(JOINED)

    def _accept(self, rec: HostRecord, hops: int | None) -> None:
        if rec.id == self.id:
            self._note_self(rec)
            return
        if hops is None:
            self.hosts.merge(rec)
            return
        _, forward = apply_rumour(self.hosts, Rumour(rec, hops), self.rng, self.config.decay)
        if forward:
            self.pending.append(Rumour(replace(rec), hops))

    def _heard(self, address: str) -> None:
        ident = host_id(address)
        self.misses.pop(ident, None)
        rec = self.hosts.get(ident)
        if rec is not None:
            rec.last_heard = self.clock()

    def handle(self, msg: GossipMessage) -> GossipMessage | None:
        with self._lock:
            self._heard(msg.sender)
            if msg.kind == "push":
                for r in msg.rumours:
                    self._accept(r.subject, r.hops)
                return None
            if msg.kind == "pull":
                # a puller we never heard of introduces itself this way
                for rec in msg.records:
                    if rec.id == host_id(msg.sender):
                        self._accept(rec, None)
                theirs = msg.digest.get(self.id)
                mine = self.hosts.get(self.id)
                if (self.running and theirs is not None and mine is not None
                        and theirs[1] == _STATUS_RANK[LEFT] and theirs[0] >= mine.seq):
                    # the puller has us down as gone: outbid it
                    self._originate(JOINED, above=theirs[0])
                return GossipMessage("records", self.address, records=[replace(r) for r in self.hosts.newer_than(msg.digest)])
            raise ProtocolError(f"unexpected message kind {msg.kind!r}")

    def on_reply(self, address: str, reply: GossipMessage | None) -> None:
        with self._lock:
            self._heard(address)
            if reply is not None and reply.kind == "records":
                for rec in reply.records:
                    self._accept(rec, None)

    def on_failure(self, address: str) -> None:
        """A direct contact failed; declare the peer left after enough misses."""
        with self._lock:
            ident = host_id(address)
            count = self.misses.get(ident, 0) + 1
            self.misses[ident] = count
            rec = self.hosts.get(ident)
            if count >= self.config.miss_threshold and rec is not None and rec.status == JOINED:
                self._originate(LEFT, ident, rec.address)
                self.misses.pop(ident, None)


def bootstrap(
    seeds: Sequence[str],
    fetch: Callable[[str], HostList],
    persisted: HostList | None = None,
    quorum: int = 1,
) -> HostList:
    """Fetch host lists from seeds (in order) and merge them by seq.

    Stops once ``quorum`` seeds have answered. If no seed answers, the
    persisted list is returned as is; without one, AllSeedsUnreachable.
    """
    if not seeds:
        raise ValueError("at least one seed address is required")
    merged = persisted.copy() if persisted is not None else HostList()
    answered = 0
    errors = []
    for seed in seeds:
        try:
            got = fetch(seed)
        except Exception as exc:  # any transport failure counts as unreachable
            errors.append(f"{seed}: {exc}")
            continue
        merged.merge_all(got)
        answered += 1
        if answered >= quorum:
            break
    if answered == 0 and persisted is None:
        raise AllSeedsUnreachable("; ".join(errors) or "no seeds")
    return merged
