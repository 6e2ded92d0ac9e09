"""Storage node: chunk store on disk, HTTP front end, gossip loop."""

from __future__ import annotations

import logging
import os
import random
import re
import tempfile
import threading
import urllib.parse
from collections import defaultdict
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import wire
from .chunk import ChunkFormatError, parse_chunk
from .config import Config, ConfigError
from .membership import (
    GossipAgent,
    GossipConfig,
    GossipMessage,
    HostList,
    ProtocolError,
    bootstrap,
)
from .placement import ChunkName, canonical_address, format_id, ring_hash

log = logging.getLogger(__name__)

HOSTS_FILE = "hosts.list"
NODE_KEYS = {
    "listen", "data_dir", "seeds", "graph_file", "bootstrap_quorum",
    "gossip.fanout", "gossip.decay", "gossip.t_min_ms", "gossip.t_max_ms", "gossip.miss_threshold",
}


class RangeNotSatisfiable(ValueError):
    def __init__(self, length: int):
        super().__init__(f"range start beyond chunk length {length}")
        self.length = length


class ChunkStore:
    """Chunks under ``<root>/<first-2-hex>/<16-hex ring hash of name>``.

    Writes go to a temporary file in the target directory and are renamed
    into place, so readers see either the old or the new chunk in full.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    def path_for(self, name: ChunkName) -> Path:
        digest = format_id(ring_hash(name.render()))
        return self.root / digest[:2] / digest

    def _lock(self, name: ChunkName) -> threading.Lock:
        with self._locks_guard:
            return self._locks[name.render()]

    def put(self, name: ChunkName, data: bytes) -> None:
        hdr, _ = parse_chunk(data)
        if hdr.index != name.index:
            raise ChunkFormatError(f"header index {hdr.index} does not match chunk name {name}")
        target = self.path_for(name)
        with self._lock(name):
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, target)
            except BaseException:
                try:
                    os.unlink(tmp)
                except FileNotFoundError:
                    pass
                raise

    def get(self, name: ChunkName, start: int | None = None, end: int | None = None) -> tuple[bytes, int]:
        """Return ``(bytes, total_length)``; ``end`` is inclusive."""
        try:
            data = self.path_for(name).read_bytes()
        except FileNotFoundError:
            raise KeyError(name.render()) from None
        total = len(data)
        if start is None:
            return data, total
        if start >= total:
            raise RangeNotSatisfiable(total)
        stop = total if end is None else min(end + 1, total)
        return data[start:stop], total

    def __contains__(self, name: ChunkName) -> bool:
        return self.path_for(name).exists()


_RANGE = re.compile(r"^bytes=(\d+)-(\d*)$")


class _Handler(BaseHTTPRequestHandler):
    server_version = "ldpcstore/0.1"
    protocol_version = "HTTP/1.1"

    node: "Node"  # set on the subclass built per server

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: bytes = b"", headers: dict | None = None) -> None:
        self.send_response(status)
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Connection", "close")
        self.end_headers()
        if body and self.command != "HEAD":
            self.wfile.write(body)
        self.close_connection = True

    def _error(self, status: int, text: str) -> None:
        self._send(status, (text + "\n").encode(), {"Content-Type": "text/plain"})

    def _chunk_name(self) -> ChunkName | None:
        raw = urllib.parse.unquote(self.path[len("/chunks/"):])
        try:
            return ChunkName.parse(raw)
        except ValueError as exc:
            self._error(400, str(exc))
            return None

    def _body(self) -> bytes | None:
        length = self.headers.get("Content-Length")
        if length is None or not length.isdigit():
            self._error(411, "Content-Length required")
            return None
        return self.rfile.read(int(length))

    def do_GET(self):
        if self.path == "/hosts":
            self._send(200, self.node.agent.snapshot().serialize().encode(), {"Content-Type": "text/plain"})
        elif self.path.startswith("/chunks/"):
            self._get_chunk()
        else:
            self._error(404, "not found")

    def _get_chunk(self):
        name = self._chunk_name()
        if name is None:
            return
        rng = self.headers.get("Range")
        start = end = None
        if rng is not None:
            match = _RANGE.match(rng.strip())
            if not match:
                self._error(400, f"unsupported range {rng!r}")
                return
            start = int(match.group(1))
            end = int(match.group(2)) if match.group(2) else None
            if end is not None and end < start:
                self._error(400, "range end before start")
                return
        try:
            data, total = self.node.store.get(name, start, end)
        except KeyError:
            self._error(404, f"no chunk {name}")
            return
        except RangeNotSatisfiable as exc:
            self._send(416, b"", {"Content-Range": f"bytes */{exc.length}"})
            return
        if start is None:
            self._send(200, data, {"Content-Type": "application/octet-stream"})
        else:
            last = start + len(data) - 1
            self._send(206, data, {"Content-Type": "application/octet-stream",
                                   "Content-Range": f"bytes {start}-{last}/{total}"})

    def do_PUT(self):
        if not self.path.startswith("/chunks/"):
            self._error(404, "not found")
            return
        name = self._chunk_name()
        if name is None:
            return
        body = self._body()
        if body is None:
            return
        try:
            self.node.store.put(name, body)
        except ChunkFormatError as exc:
            self._error(400, str(exc))
            return
        except OSError as exc:
            self._error(507, f"cannot store chunk: {exc}")
            return
        self._send(201)

    def do_POST(self):
        if self.path != "/gossip":
            self._error(404, "not found")
            return
        body = self._body()
        if body is None:
            return
        try:
            msg = GossipMessage.decode(body)
            reply = self.node.agent.handle(msg)
        except ProtocolError as exc:
            self._error(400, f"protocol error: {exc}")
            return
        if reply is None:
            self._send(204)
        else:
            self._send(200, reply.encode(), {"Content-Type": "text/plain"})


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128


@dataclass
class NodeConfig:
    listen: str
    data_dir: Path
    seeds: list[str] = field(default_factory=list)
    gossip: GossipConfig = field(default_factory=GossipConfig)
    bootstrap_quorum: int = 1
    graph_file: Path | None = None

    @classmethod
    def from_config(cls, cfg: Config) -> "NodeConfig":
        cfg.check_keys(NODE_KEYS)
        try:
            gossip = GossipConfig(
                fanout=cfg.get_int("gossip.fanout", 3),
                decay=cfg.get_float("gossip.decay", 0.5),
                t_min=cfg.get_int("gossip.t_min_ms", 1000) / 1000.0,
                t_max=cfg.get_int("gossip.t_max_ms", 3000) / 1000.0,
                miss_threshold=cfg.get_int("gossip.miss_threshold", 5),
            )
            listen = canonical_address(cfg.require("listen"))
            seeds = [canonical_address(s) for s in cfg.get_list("seeds")]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        data_dir = cfg.resolve_path("data_dir")
        if data_dir is None:
            raise ConfigError("missing required key 'data_dir'")
        return cls(listen, data_dir, seeds, gossip, cfg.get_int("bootstrap_quorum", 1), cfg.resolve_path("graph_file"))


class Node:
    """One storage host. ``start()`` binds and joins; ``stop()`` leaves cleanly."""

    def __init__(self, config: NodeConfig, rng_seed: int | None = None):
        self.config = config
        self.store = ChunkStore(config.data_dir)
        self._hosts_path = Path(config.data_dir) / HOSTS_FILE
        persisted = HostList.load(self._hosts_path) if self._hosts_path.exists() else None
        seed = rng_seed if rng_seed is not None else ring_hash(config.listen)
        self.agent = GossipAgent(config.listen, config.gossip, random.Random(seed), persisted)
        self._server: _Server | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    @property
    def address(self) -> str:
        return self.config.listen

    def start(self) -> "Node":
        host, _, port = self.config.listen.rpartition(":")
        handler = type("Handler", (_Handler,), {"node": self})
        self._server = _Server((host, int(port)), handler)
        self._stop.clear()
        seeds = [s for s in self.config.seeds if s != self.config.listen]
        if seeds:
            try:
                hosts = bootstrap(seeds, wire.get_hosts, quorum=self.config.bootstrap_quorum)
                self.agent.bootstrap_from(hosts)
            except ConnectionError as exc:
                log.warning("%s: bootstrap failed: %s", self.address, exc)
        self.agent.start()
        self._persist()
        self._threads = [
            threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
                             name=f"http-{self.address}", daemon=True),
            threading.Thread(target=self._gossip_loop, name=f"gossip-{self.address}", daemon=True),
        ]
        for t in self._threads:
            t.start()
        # announce ourselves right away instead of waiting a full period
        self._send_all(self.agent.round())
        return self

    def _persist(self) -> None:
        try:
            self.agent.snapshot().save(self._hosts_path)
        except OSError as exc:
            log.warning("%s: cannot persist host list: %s", self.address, exc)

    def _send_all(self, messages) -> None:
        timeout = max(0.5, self.config.gossip.t_max)
        for address, msg in messages:
            try:
                reply = wire.post_gossip(address, msg, timeout=timeout)
            except (ConnectionError, wire.RemoteError, ProtocolError, OSError):
                self.agent.on_failure(address)
                continue
            self.agent.on_reply(address, reply)

    def _gossip_loop(self) -> None:
        while not self._stop.wait(self.agent.next_delay()):
            self._send_all(self.agent.round())
            self._persist()

    def gossip_now(self) -> None:
        self._send_all(self.agent.round())

    def stop(self, clean: bool = True) -> None:
        """Shut down; with ``clean`` a ``left`` rumour is pushed first."""
        self._stop.set()
        if clean and self.agent.running:
            self._send_all(self.agent.leave())
        else:
            self.agent.running = False
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        for t in self._threads:
            t.join(timeout=5)
        self._threads = []
        self._persist()

    def kill(self) -> None:
        """Abrupt stop: no goodbye rumour, as if the host crashed."""
        self.stop(clean=False)

    def wait(self) -> None:
        self._stop.wait()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(cfg: Config) -> Node:
    return Node(NodeConfig.from_config(cfg)).start()
