import threading
import time

import pytest

from ldpcstore import wire
from ldpcstore.chunk import ChunkHeader, build_chunk
from ldpcstore.config import ConfigError, parse_config
from ldpcstore.membership import GossipConfig, GossipMessage, HostList, HostRecord
from ldpcstore.node import ChunkStore, Node, NodeConfig, RangeNotSatisfiable
from ldpcstore.placement import ChunkName, host_id
from cluster import free_ports

FAST = GossipConfig(t_min=0.05, t_max=0.15, miss_threshold=3)


def chunk_bytes(index=0, size=100, fill=b"x"):
    hdr = ChunkHeader(size, 4, 2, index, 99)
    return build_chunk(hdr, (fill * hdr.payload_len)[: hdr.payload_len])


def test_store_roundtrip_and_ranges(tmp_path):
    store = ChunkStore(tmp_path)
    name = ChunkName("f", 1)
    data = chunk_bytes(1)
    store.put(name, data)
    assert store.get(name) == (data, len(data))
    assert store.get(name, 0, 35)[0] == data[:36]
    assert store.get(name, 50)[0] == data[50:]
    assert store.get(name, 10, 10**6)[0] == data[10:]
    with pytest.raises(RangeNotSatisfiable):
        store.get(name, len(data))
    with pytest.raises(KeyError):
        store.get(ChunkName("f", 2))


def test_store_rejects_bad_chunks(tmp_path):
    store = ChunkStore(tmp_path)
    with pytest.raises(ValueError):
        store.put(ChunkName("f", 0), chunk_bytes(0)[:-1])
    with pytest.raises(ValueError):
        store.put(ChunkName("f", 3), chunk_bytes(0))
    assert ChunkName("f", 0) not in store


def test_store_survives_restart(tmp_path):
    ChunkStore(tmp_path).put(ChunkName("f", 2), chunk_bytes(2))
    assert ChunkStore(tmp_path).get(ChunkName("f", 2))[0] == chunk_bytes(2)


def test_concurrent_writes_never_tear(tmp_path):
    store = ChunkStore(tmp_path)
    name = ChunkName("f", 0)
    a, b = chunk_bytes(0, 200000, b"a"), chunk_bytes(0, 200000, b"b")
    store.put(name, a)
    stop = threading.Event()
    seen = []

    def reader():
        while not stop.is_set():
            seen.append(store.get(name)[0] in (a, b))

    t = threading.Thread(target=reader)
    t.start()
    writers = [threading.Thread(target=store.put, args=(name, x)) for x in (a, b) * 10]
    for w in writers:
        w.start()
    for w in writers:
        w.join()
    stop.set()
    t.join()
    assert all(seen) and seen
    assert store.get(name)[0] in (a, b)
    assert not [p for p in tmp_path.rglob(".tmp-*")]


def test_node_config(tmp_path):
    cfg = parse_config("listen = 127.0.0.1:7001\ndata_dir = d\nseeds = 127.0.0.1:7002\ngossip.t_min_ms = 200\n",
                       tmp_path / "n.conf")
    nc = NodeConfig.from_config(cfg)
    assert nc.listen == "127.0.0.1:7001" and nc.data_dir == tmp_path / "d"
    assert nc.gossip.t_min == 0.2 and nc.seeds == ["127.0.0.1:7002"]
    with pytest.raises(ConfigError):
        NodeConfig.from_config(parse_config("listen = a:1\ndata_dir = d\nbogus = 1\n"))
    with pytest.raises(ConfigError):
        NodeConfig.from_config(parse_config("data_dir = d\n"))


@pytest.fixture
def node(tmp_path):
    port = free_ports(1)[0]
    n = Node(NodeConfig(f"127.0.0.1:{port}", tmp_path / "n", [], FAST), rng_seed=1).start()
    yield n
    n.stop()


def test_http_chunk_protocol(node):
    addr = node.address
    data = chunk_bytes(3)
    wire.put_chunk(addr, "f.3", data)
    assert wire.get_chunk(addr, "f.3") == data
    assert wire.get_chunk(addr, "f.3", 0, 35) == data[:36]
    for k in (1, 17, 36, len(data) - 1):
        assert wire.get_chunk(addr, "f.3", 0, k - 1) + wire.get_chunk(addr, "f.3", k) == data
    status, headers, _ = wire.request(addr, "GET", "/chunks/f.3", headers={"Range": "bytes=5-9"})
    assert status == 206 and headers["content-range"] == f"bytes 5-9/{len(data)}"
    status, headers, _ = wire.request(addr, "GET", "/chunks/f.3", headers={"Range": f"bytes={len(data)}-"})
    assert status == 416 and headers["content-range"] == f"bytes */{len(data)}"
    with pytest.raises(wire.ChunkNotFound):
        wire.get_chunk(addr, "f.4")
    with pytest.raises(wire.RemoteError) as ei:
        wire.put_chunk(addr, "f.3", data[:-1])
    assert ei.value.status == 400
    assert wire.request(addr, "GET", "/chunks/nodot")[0] == 400
    assert wire.request(addr, "GET", "/elsewhere")[0] == 404


def test_http_hosts_and_gossip(node):
    addr = node.address
    hosts = wire.get_hosts(addr)
    assert hosts.alive() == [host_id(addr)]
    reply = wire.post_gossip(addr, GossipMessage("pull", "127.0.0.1:1"))
    assert [r.address for r in reply.records] == [addr]
    assert wire.post_gossip(addr, GossipMessage("pull", "127.0.0.1:1", digest=hosts.digest())).records == []
    fresh = HostRecord.for_address("127.0.0.1:2")
    from ldpcstore.membership import Rumour
    assert wire.post_gossip(addr, GossipMessage("push", "127.0.0.1:1", rumours=[Rumour(fresh, 1)])) is None
    assert fresh.id in wire.get_hosts(addr)
    before = wire.get_hosts(addr).state()
    status, _, _ = wire.request(addr, "POST", "/gossip", body=b"garbage")
    assert status == 400
    assert wire.get_hosts(addr).state() == before


def wait_for(pred, timeout=10.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(0.02)
    return pred()


def test_two_nodes_find_each_other(tmp_path):
    a_port, b_port = free_ports(2)
    a_addr, b_addr = f"127.0.0.1:{a_port}", f"127.0.0.1:{b_port}"
    a = Node(NodeConfig(a_addr, tmp_path / "a", [], FAST), rng_seed=1).start()
    b = Node(NodeConfig(b_addr, tmp_path / "b", [a_addr], FAST), rng_seed=2).start()
    try:
        both = {host_id(a_addr), host_id(b_addr)}
        assert wait_for(lambda: set(a.agent.hosts.alive()) == both == set(b.agent.hosts.alive()), 5.0)
        b.stop()
        assert wait_for(lambda: a.agent.hosts.alive() == [host_id(a_addr)], 5.0)
    finally:
        a.stop()


def test_restart_keeps_chunks_and_hosts(tmp_path):
    port = free_ports(1)[0]
    cfg = NodeConfig(f"127.0.0.1:{port}", tmp_path / "n", [], FAST)
    with Node(cfg, rng_seed=1) as n:
        wire.put_chunk(n.address, "f.0", chunk_bytes(0))
    assert HostList.load(tmp_path / "n" / "hosts.list")
    with Node(cfg, rng_seed=1) as n:
        assert wire.get_chunk(n.address, "f.0") == chunk_bytes(0)
        assert wire.get_hosts(n.address).get(host_id(n.address)).seq >= 3


def test_gossip_answers_under_load(node):
    big = chunk_bytes(0, 4_000_000)
    wire.put_chunk(node.address, "big.0", big)
    errors = []

    def pull():
        try:
            assert wire.get_chunk(node.address, "big.0", timeout=30) == big
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=pull) for _ in range(32)]
    for t in threads:
        t.start()
    t0 = time.monotonic()
    wire.post_gossip(node.address, GossipMessage("pull", "127.0.0.1:1"), timeout=5)
    latency = time.monotonic() - t0
    for t in threads:
        t.join()
    assert not errors
    # the default round period is at least t_min seconds
    assert latency < GossipConfig().t_min
