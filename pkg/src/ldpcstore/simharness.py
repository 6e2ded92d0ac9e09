"""Deterministic discrete-event simulation of a storage cluster.

Nodes run the production :class:`~ldpcstore.membership.GossipAgent`; reads
run the production :func:`~ldpcstore.client.assemble`. Only the clock and
the transport are virtual. Each node draws from its own seeded generator,
the network from another, so a (config, seed) pair always produces the same
report.

Event lines (``[events]`` section of a sim config)::

    t=<ms> join [count]
    t=<ms> leave <node>
    t=<ms> crash <node>
    t=<ms> partition <group>/<group>[/...]    groups like 0-3,7
    t=<ms> heal
    t=<ms> put <name> <bytes>
    t=<ms> get <name>
"""

from __future__ import annotations

import heapq
import io
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .chunk import ChunkHeader, build_chunk, split_file
from .client import ChunkMissing, assemble
from .codec import NotDecodable, TannerGraph, deployment_graph, encode
from .config import Config, ConfigError
from .membership import JOINED, GossipAgent, GossipConfig, HostList, HostRecord
from .placement import ChunkName, HashRing, placement_plan

SIM_KEYS = {
    "nodes", "seed", "round_cap", "graph_file",
    "net.delivery", "net.latency_min_ms", "net.latency_max_ms", "net.timeout_ms",
    "gossip.fanout", "gossip.decay", "gossip.t_min_ms", "gossip.t_max_ms", "gossip.miss_threshold",
    "availability.trials", "availability.mu", "availability.file_size",
}
EVENT_KINDS = {"join", "leave", "crash", "partition", "heal", "put", "get"}
MEMBERSHIP_KINDS = {"join", "leave", "crash", "partition", "heal"}


class NoConvergence(RuntimeError):
    def __init__(self, cap: int):
        super().__init__(f"host lists did not converge within {cap} rounds")
        self.cap = cap


@dataclass(frozen=True)
class SimEvent:
    t_ms: int
    kind: str
    args: tuple[str, ...] = ()

    @classmethod
    def parse(cls, line: str) -> "SimEvent":
        parts = line.split()
        if not parts or not parts[0].startswith("t="):
            raise ConfigError(f"event must start with t=<ms>: {line!r}")
        try:
            t = int(parts[0][2:])
        except ValueError:
            raise ConfigError(f"bad event time in {line!r}") from None
        if t < 0:
            raise ConfigError(f"event time must be >= 0 in {line!r}")
        if len(parts) < 2 or parts[1] not in EVENT_KINDS:
            raise ConfigError(f"unknown event kind in {line!r}")
        return cls(t, parts[1], tuple(parts[2:]))

    def line(self) -> str:
        return " ".join([f"t={self.t_ms}", self.kind, *self.args])


@dataclass
class SimConfig:
    nodes: int = 8
    seed: int = 0
    delivery: float = 1.0
    latency_min_ms: int = 1
    latency_max_ms: int = 10
    timeout_ms: int = 500
    gossip: GossipConfig = field(default_factory=GossipConfig)
    events: list[SimEvent] = field(default_factory=list)
    round_cap: int = 200
    graph: TannerGraph | None = None
    availability_trials: int = 0
    availability_mu: float = 0.95
    availability_file_size: int = 64

    def __post_init__(self):
        if self.nodes < 1:
            raise ConfigError("nodes must be >= 1")
        if not 0.0 <= self.delivery <= 1.0:
            raise ConfigError("net.delivery must be within [0, 1]")
        if not 0 <= self.latency_min_ms <= self.latency_max_ms:
            raise ConfigError("need 0 <= latency_min_ms <= latency_max_ms")
        if not 0.0 <= self.availability_mu <= 1.0:
            raise ConfigError("availability.mu must be within [0, 1]")
        times = [e.t_ms for e in self.events]
        if times != sorted(times):
            raise ConfigError("event times must be non-decreasing")
        if any(t < 0 for t in times):
            raise ConfigError("event times must be >= 0")

    @property
    def period_ms(self) -> float:
        return (self.gossip.t_min + self.gossip.t_max) / 2 * 1000.0

    @classmethod
    def from_config(cls, cfg: Config) -> "SimConfig":
        cfg.check_keys(SIM_KEYS)
        try:
            gossip = GossipConfig(
                fanout=cfg.get_int("gossip.fanout", 3),
                decay=cfg.get_float("gossip.decay", 0.5),
                t_min=cfg.get_int("gossip.t_min_ms", 1000) / 1000.0,
                t_max=cfg.get_int("gossip.t_max_ms", 3000) / 1000.0,
                miss_threshold=cfg.get_int("gossip.miss_threshold", 5),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        graph_path = cfg.resolve_path("graph_file")
        extra = set(cfg.sections) - {"events"}
        if extra:
            raise ConfigError(f"unknown sections: {', '.join(sorted(extra))}")
        return cls(
            nodes=cfg.get_int("nodes", 8),
            seed=cfg.get_int("seed", 0),
            delivery=cfg.get_float("net.delivery", 1.0),
            latency_min_ms=cfg.get_int("net.latency_min_ms", 1),
            latency_max_ms=cfg.get_int("net.latency_max_ms", 10),
            timeout_ms=cfg.get_int("net.timeout_ms", 500),
            gossip=gossip,
            events=[SimEvent.parse(line) for line in cfg.sections.get("events", [])],
            round_cap=cfg.get_int("round_cap", 200),
            graph=TannerGraph.load(graph_path) if graph_path else None,
            availability_trials=cfg.get_int("availability.trials", 0),
            availability_mu=cfg.get_float("availability.mu", 0.95),
            availability_file_size=cfg.get_int("availability.file_size", 64),
        )


@dataclass
class GetOutcome:
    t_ms: int
    name: str
    success: bool
    fetched: int
    xors: int
    detail: str = ""


@dataclass
class SimReport:
    epochs: list[tuple[int, int | None]] = field(default_factory=list)
    convergence_rounds: int | None = None
    gets: list[GetOutcome] = field(default_factory=list)
    availability: float | None = None
    availability_trials: int = 0
    messages_sent: int = 0
    messages_delivered: int = 0
    messages_dropped: int = 0
    end_ms: int = 0

    @property
    def availability_stderr(self) -> float | None:
        if self.availability is None or not self.availability_trials:
            return None
        p = self.availability
        return math.sqrt(p * (1 - p) / self.availability_trials)

    def gets_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t_ms,name,success,chunks_fetched,xors,detail\n")
        for g in self.gets:
            buf.write(f"{g.t_ms},{g.name},{int(g.success)},{g.fetched},{g.xors},{g.detail}\n")
        return buf.getvalue()

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch_start_ms,rounds\n")
        for start, rounds in self.epochs:
            buf.write(f"{start},{'' if rounds is None else rounds}\n")
        return buf.getvalue()

    def summary(self) -> str:
        conv = "none" if self.convergence_rounds is None else str(self.convergence_rounds)
        lines = [
            f"convergence_rounds = {conv}",
            f"epochs = {len(self.epochs)}",
            f"gets = {len(self.gets)}",
            f"gets_succeeded = {sum(g.success for g in self.gets)}",
            f"messages_sent = {self.messages_sent}",
            f"messages_delivered = {self.messages_delivered}",
            f"messages_dropped = {self.messages_dropped}",
            f"end_ms = {self.end_ms}",
        ]
        if self.availability is not None:
            lines += [
                f"availability = {self.availability:.10f}",
                f"availability_trials = {self.availability_trials}",
                f"availability_stderr = {self.availability_stderr:.10f}",
            ]
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gets.csv").write_text(self.gets_csv())
        (out / "convergence.csv").write_text(self.epochs_csv())
        (out / "summary.txt").write_text(self.summary())

    def to_bytes(self) -> bytes:
        return (self.summary() + self.epochs_csv() + self.gets_csv()).encode()


def _parse_group(text: str) -> set[int]:
    out: set[int] = set()
    for part in text.split(","):
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            out.update(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        except ValueError:
            raise ConfigError(f"bad node group {text!r}") from None
    return out


class _SimNode:
    def __init__(self, index: int, address: str, agent: GossipAgent):
        self.index = index
        self.address = address
        self.agent = agent
        self.up = True
        self.chunks: dict[str, bytes] = {}
        self.timer_token = 0


class Simulation:
    def __init__(self, config: SimConfig):
        self.cfg = config
        self.graph = config.graph or deployment_graph()
        self.now = 0.0
        self._queue: list = []
        self._counter = 0
        self.net_rng = random.Random(f"{config.seed}:net")
        self.work_rng = random.Random(f"{config.seed}:work")
        self.nodes: list[_SimNode] = []
        self.by_address: dict[str, _SimNode] = {}
        self.partition: dict[int, int] | None = None
        self.report = SimReport()
        self._states: dict[int, tuple] = {}
        self._state_counts: Counter = Counter()
        self.seen_ids: set[int] = set()
        self.files: dict[str, int] = {}
        for _ in range(config.nodes):
            self._make_node()
        everyone = HostList(HostRecord.for_address(n.address) for n in self.nodes)
        for n in self.nodes:
            n.agent.hosts = everyone.copy()
            n.agent.running = True
            self._schedule_timer(n)
        for n in self.nodes:
            self._track(n)

    # -- plumbing ---------------------------------------------------------

    def _push(self, t: float, kind: str, *payload) -> None:
        self._counter += 1
        heapq.heappush(self._queue, (t, self._counter, kind, payload))

    def _make_node(self) -> _SimNode:
        i = len(self.nodes)
        address = f"10.{i // 65536}.{i // 256 % 256}.{i % 256}:7000"
        agent = GossipAgent(address, self.cfg.gossip, random.Random(f"{self.cfg.seed}:node:{i}"),
                            clock=lambda: self.now)
        node = _SimNode(i, agent.address, agent)
        self.nodes.append(node)
        self.by_address[node.address] = node
        self.seen_ids.add(agent.id)
        return node

    def _schedule_timer(self, node: _SimNode) -> None:
        node.timer_token += 1
        self._push(self.now + node.agent.next_delay() * 1000.0, "timer", node.index, node.timer_token)

    def _connected(self, a: _SimNode, b: _SimNode) -> bool:
        if self.partition is None:
            return True
        return self.partition.get(a.index, -1) == self.partition.get(b.index, -1)

    def _latency(self) -> float:
        return self.net_rng.uniform(self.cfg.latency_min_ms, self.cfg.latency_max_ms)

    def _delivered(self) -> bool:
        return self.cfg.delivery >= 1.0 or self.net_rng.random() < self.cfg.delivery

    def _send(self, sender: _SimNode, address: str, msg) -> None:
        self.report.messages_sent += 1
        target = self.by_address.get(address)
        if target is None or not target.up or not self._connected(sender, target) or not self._delivered():
            self.report.messages_dropped += 1
            self._push(self.now + self.cfg.timeout_ms, "timeout", sender.index, address)
            return
        self._push(self.now + self._latency(), "deliver", sender.index, target.index, msg)

    def _track(self, node: _SimNode) -> None:
        old = self._states.pop(node.index, None)
        if old is not None:
            self._state_counts[old] -= 1
            if not self._state_counts[old]:
                del self._state_counts[old]
        if node.up:
            state = node.agent.hosts.state()
            self._states[node.index] = state
            self._state_counts[state] += 1

    def converged(self) -> bool:
        """All up nodes hold the same list and it names exactly the up nodes."""
        if len(self._state_counts) > 1:
            return False
        if not self._state_counts:
            return True
        (state,) = self._state_counts
        alive = {ident for ident, _, status, _ in state if status == JOINED}
        return alive == {n.agent.id for n in self.nodes if n.up}

    # -- event handlers ---------------------------------------------------

    def _on_timer(self, index: int, token: int) -> None:
        node = self.nodes[index]
        if not node.up or token != node.timer_token:
            return
        version = node.agent.hosts.version
        for address, msg in node.agent.round():
            self._send(node, address, msg)
        if node.agent.hosts.version != version:
            self._track(node)
        self._schedule_timer(node)

    def _on_deliver(self, src: int, dst: int, msg) -> None:
        sender, target = self.nodes[src], self.nodes[dst]
        if not target.up:
            self.report.messages_dropped += 1
            self._push(self.now + self.cfg.timeout_ms - self.cfg.latency_max_ms, "timeout", src, target.address)
            return
        self.report.messages_delivered += 1
        version = target.agent.hosts.version
        reply = target.agent.handle(msg)
        if target.agent.hosts.version != version:
            self._track(target)
        if reply is not None or msg.kind == "push":
            # the ack (or the reply) travels back; losing it looks like a failure
            if sender.up and self._connected(sender, target) and self._delivered():
                self._push(self.now + self._latency(), "reply", src, target.address, reply)
            else:
                self.report.messages_dropped += 1
                self._push(self.now + self.cfg.timeout_ms, "timeout", src, target.address)

    def _on_reply(self, index: int, address: str, reply) -> None:
        node = self.nodes[index]
        if not node.up:
            return
        version = node.agent.hosts.version
        node.agent.on_reply(address, reply)
        if node.agent.hosts.version != version:
            self._track(node)

    def _on_timeout(self, index: int, address: str) -> None:
        node = self.nodes[index]
        if not node.up:
            return
        version = node.agent.hosts.version
        node.agent.on_failure(address)
        if node.agent.hosts.version != version:
            self._track(node)

    def _alive(self) -> list[_SimNode]:
        return [n for n in self.nodes if n.up]

    def _apply(self, ev: SimEvent) -> None:
        if ev.kind == "join":
            count = int(ev.args[0]) if ev.args else 1
            for _ in range(count):
                alive = self._alive()
                node = self._make_node()
                if alive:
                    seed = alive[self.work_rng.randrange(len(alive))]
                    node.agent.bootstrap_from(seed.agent.snapshot())
                node.agent.start()
                self._track(node)
                for address, msg in node.agent.round():
                    self._send(node, address, msg)
                self._schedule_timer(node)
        elif ev.kind in ("leave", "crash"):
            node = self._node_arg(ev)
            if not node.up:
                return
            if ev.kind == "leave":
                for address, msg in node.agent.leave():
                    self._send(node, address, msg)
            node.up = False
            node.agent.running = False
            self._track(node)
        elif ev.kind == "partition":
            if not ev.args:
                raise ConfigError("partition needs groups")
            groups = ev.args[0].split("/")
            self.partition = {}
            for g, text in enumerate(groups):
                for i in _parse_group(text):
                    self.partition[i] = g
        elif ev.kind == "heal":
            self.partition = None
        elif ev.kind == "put":
            if len(ev.args) != 2:
                raise ConfigError("put needs <name> <bytes>")
            self.put(ev.args[0], int(ev.args[1]))
        elif ev.kind == "get":
            if len(ev.args) != 1:
                raise ConfigError("get needs <name>")
            self.report.gets.append(self.get(ev.args[0]))

    def _node_arg(self, ev: SimEvent) -> _SimNode:
        try:
            return self.nodes[int(ev.args[0])]
        except (IndexError, ValueError):
            raise ConfigError(f"{ev.kind} needs an existing node index: {ev.line()!r}") from None

    # -- files ------------------------------------------------------------

    def _host_view(self) -> HostList:
        alive = self._alive()
        if not alive:
            return HostList()
        return alive[self.work_rng.randrange(len(alive))].agent.snapshot()

    def _payload(self, name: str, size: int) -> bytes:
        return random.Random(f"{self.cfg.seed}:file:{name}").randbytes(size)

    def put(self, name: str, size: int, hosts: HostList | None = None) -> list[int]:
        """Store a file through a client view of the host list; returns discarded indices."""
        g = self.graph
        data = self._payload(name, size)
        hosts = hosts or self._host_view()
        blocks = split_file(data, g.n)
        blocks += encode(g, blocks)
        fp = g.fingerprint
        discarded = []
        for chunk, owner in placement_plan(name, g.n, g.m, hosts.alive()):
            target = self.by_address.get(hosts.address_of(owner))
            if target is None or not target.up:
                discarded.append(chunk.index)
                continue
            target.chunks[chunk.render()] = build_chunk(ChunkHeader(size, g.n, g.m, chunk.index, fp), blocks[chunk.index])
        self.files[name] = size
        return discarded

    def _fetcher(self, name: str, hosts: HostList, up=None):
        ring = HashRing(hosts.alive())
        counter = [0]

        def fetch(i: int) -> bytes:
            counter[0] += 1
            chunk = ChunkName(name, i)
            node = self.by_address.get(hosts.address_of(ring.owner(chunk)))
            alive = node is not None and (node.up if up is None else up[node.index])
            if not alive:
                raise ChunkMissing(i, False)
            try:
                return node.chunks[chunk.render()]
            except KeyError:
                raise ChunkMissing(i, True) from None

        return fetch, counter

    def get(self, name: str, hosts: HostList | None = None, up=None) -> GetOutcome:
        hosts = hosts or self._host_view()
        t = int(self.now)
        if not hosts.alive():
            return GetOutcome(t, name, False, 0, 0, "no hosts")
        fetch, counter = self._fetcher(name, hosts, up)
        try:
            data, stats = assemble(self.graph, fetch)
        except NotDecodable as exc:
            return GetOutcome(t, name, False, counter[0], 0, "missing " + " ".join(map(str, exc.missing)))
        except LookupError:
            return GetOutcome(t, name, False, counter[0], 0, "not found")
        ok = name in self.files and data == self._payload(name, self.files[name])
        return GetOutcome(t, name, ok, len(stats.fetched), stats.xors, "" if ok else "corrupt")

    def distinct_name(self, base: str, attempts: int = 100000) -> str:
        """A name derived from ``base`` whose chunks land on distinct hosts."""
        ids = HashRing(n.agent.id for n in self._alive()).ids
        if len(ids) >= self.graph.size:
            for k in range(attempts):
                name = base if k == 0 else f"{base}-{k}"
                if not placement_plan(name, self.graph.n, self.graph.m, ids).collisions:
                    return name
        raise ConfigError(f"no collision-free placement for {base!r} on {len(ids)} hosts")

    def availability_trials(self, trials: int, mu: float, size: int) -> float:
        """Fraction of trials in which a read succeeds when each node is up w.p. mu.

        The file gets a collision-free placement when the cluster allows it,
        which is the setting the exact per-graph availability describes.
        """
        try:
            name = self.distinct_name("avail")
        except ConfigError:
            name = "avail"
        hosts = HostList(HostRecord.for_address(n.address) for n in self._alive())
        self.put(name, size, hosts)
        rng = random.Random(f"{self.cfg.seed}:avail")
        ok = 0
        count = len(self.nodes)
        for _ in range(trials):
            up = [rng.random() < mu for _ in range(count)]
            if self.get(name, hosts, up).success:
                ok += 1
        return ok / trials

    # -- main loop --------------------------------------------------------

    def run(self) -> SimReport:
        cfg = self.cfg
        for ev in cfg.events:
            self._push(float(ev.t_ms), "event", ev)
        membership_times = [ev.t_ms for ev in cfg.events if ev.kind in MEMBERSHIP_KINDS]
        last = float(membership_times[-1]) if membership_times else 0.0
        epoch_starts = sorted(set([0] + membership_times))
        period = cfg.period_ms
        horizon = last + cfg.round_cap * period
        epoch_idx = 0
        epoch_result: dict[int, int | None] = {s: None for s in epoch_starts}
        epoch_done = False

        def check(now: float) -> bool:
            nonlocal epoch_done
            start = epoch_starts[epoch_idx]
            if not epoch_done and self.converged():
                epoch_result[start] = math.ceil((now - start) / period - 1e-9) if now > start else 0
                epoch_done = True
            return epoch_done and start == epoch_starts[-1]

        finished = check(0.0) and not cfg.events
        pending_events = len(cfg.events)
        while self._queue and not finished:
            t, _, kind, payload = heapq.heappop(self._queue)
            if t > horizon:
                break
            self.now = t
            if kind == "event":
                pending_events -= 1
                ev = payload[0]
                self._apply(ev)
                if ev.kind in MEMBERSHIP_KINDS:
                    # all events at the same instant belong to one epoch
                    nxt = epoch_starts.index(ev.t_ms)
                    if nxt != epoch_idx:
                        epoch_idx, epoch_done = nxt, False
            elif kind == "timer":
                self._on_timer(*payload)
            elif kind == "deliver":
                self._on_deliver(*payload)
            elif kind == "reply":
                self._on_reply(*payload)
            elif kind == "timeout":
                self._on_timeout(*payload)
            if check(t) and not pending_events:
                finished = True

        self.report.epochs = [(s, epoch_result[s]) for s in epoch_starts]
        self.report.convergence_rounds = epoch_result[epoch_starts[-1]]
        self.report.end_ms = int(self.now)
        if cfg.availability_trials:
            self.report.availability = self.availability_trials(
                cfg.availability_trials, cfg.availability_mu, cfg.availability_file_size)
            self.report.availability_trials = cfg.availability_trials
        return self.report

    def host_states(self) -> dict[int, tuple]:
        return {n.index: n.agent.hosts.state() for n in self._alive()}


def run_sim(config: SimConfig) -> SimReport:
    return Simulation(config).run()


def measure_convergence(config: SimConfig) -> int:
    """Gossip rounds after the last membership event until all alive lists agree."""
    report = run_sim(config)
    if report.convergence_rounds is None:
        raise NoConvergence(config.round_cap)
    return report.convergence_rounds


def random_schedule(seed: int, nodes: int, events: int, spacing_ms: int = 1000) -> list[SimEvent]:
    """Join/leave churn keeping at least two nodes alive."""
    rng = random.Random(f"schedule:{seed}")
    alive = list(range(nodes))
    total = nodes
    out = []
    t = 0
    for _ in range(events):
        t += rng.randint(spacing_ms // 2, spacing_ms * 3 // 2)
        if len(alive) > 2 and rng.random() < 0.5:
            victim = alive.pop(rng.randrange(len(alive)))
            out.append(SimEvent(t, "leave", (str(victim),)))
        else:
            out.append(SimEvent(t, "join"))
            alive.append(total)
            total += 1
    return out
