import itertools
import random

import pytest

from ldpcstore import client as cl
from ldpcstore import wire
from ldpcstore.chunk import ChunkHeader, build_chunk, chunk_len, split_file
from ldpcstore.client import (
    ChunkMissing,
    ClientConfig,
    FileManifest,
    Infeasible,
    NotFound,
    TooManyUploadFailures,
    assemble,
    decode_benchmark,
    plan_recovery,
)
from ldpcstore.codec import NotDecodable, encode, find_failing_pattern, is_decodable
from ldpcstore.config import ConfigError, parse_config
from ldpcstore.membership import GossipConfig
from cluster import Cluster, make_client, spread_addresses

FILE = "payload.bin"


def chunks_of(graph, data):
    blocks = split_file(data, graph.n)
    blocks += encode(graph, blocks)
    fp = graph.fingerprint
    return [build_chunk(ChunkHeader(len(data), graph.n, graph.m, i, fp), b) for i, b in enumerate(blocks)]


def source(chunks, gone=()):
    def fetch(i):
        if i in gone:
            raise ChunkMissing(i, True)
        return chunks[i]
    return fetch


def test_plan_recovery_examples(fig2, deploy):
    assert plan_recovery(fig2, [], [3, 4]) == []
    assert plan_recovery(fig2, [0], [3, 4]) == [3]
    with pytest.raises(Infeasible):
        plan_recovery(fig2, [0], [4])
    for missing in itertools.combinations(range(8), 3):
        plan = plan_recovery(deploy, missing, range(8, 14))
        assert len(plan) <= 6
        have = (set(range(8)) - set(missing)) | set(plan)
        assert is_decodable(deploy, have)
        # minimal: no strict subset of the plan works
        for sub in itertools.combinations(plan, len(plan) - 1):
            assert not is_decodable(deploy, (set(range(8)) - set(missing)) | set(sub))


def test_assemble_pure_concatenation(deploy):
    data = random.Random(1).randbytes(1000)
    out, stats = assemble(deploy, source(chunks_of(deploy, data)))
    assert out == data and stats.xors == 0 and sorted(stats.fetched) == list(range(8))


@pytest.mark.parametrize("size", [0, 1, 124, 125, 126, 999, 1000, 1001])
def test_assemble_edge_sizes(deploy, size):
    # 125 bytes per chunk at size 1000: covers L-1, L, L+1, nL-1, nL, nL+1
    data = random.Random(size).randbytes(size)
    chunks = chunks_of(deploy, data)
    for gone in [(), (0,), (1, 5), (0, 3, 7), (2, 9, 13)]:
        out, _ = assemble(deploy, source(chunks, gone))
        assert out == data


def test_assemble_every_three_loss_pattern(deploy):
    data = random.Random(7).randbytes(4099)
    chunks = chunks_of(deploy, data)
    for gone in itertools.combinations(range(14), 3):
        out, stats = assemble(deploy, source(chunks, set(gone)))
        assert out == data
        assert not set(gone) & set(stats.fetched)


def test_assemble_witness_fails(deploy):
    chunks = chunks_of(deploy, b"hello world" * 50)
    witness = find_failing_pattern(deploy, 4)
    with pytest.raises(NotDecodable) as ei:
        assemble(deploy, source(chunks, set(witness)))
    assert ei.value.missing and set(ei.value.missing) <= set(range(8))


def test_assemble_not_found_vs_damaged(deploy):
    with pytest.raises(NotFound):
        assemble(deploy, source([], set(range(14))))

    def unreachable(i):
        raise ChunkMissing(i, False)

    with pytest.raises(NotDecodable):
        assemble(deploy, unreachable)


def test_assemble_ignores_foreign_chunks(deploy):
    data = b"a" * 800
    chunks = chunks_of(deploy, data)
    other = chunks_of(deploy, b"b" * 808)
    chunks[2] = other[2]  # same index, different file size
    chunks[4] = other[5]  # wrong index
    out, stats = assemble(deploy, source(chunks))
    assert out == data and 2 not in stats.fetched and 4 not in stats.fetched


def test_manifest_roundtrip(tmp_path):
    man = FileManifest("f", 10, 8, 6, 123, [(0, "stored", 5), (1, "discarded", 6)])
    path = man.save(tmp_path)
    assert path == tmp_path / "f.manifest"
    back = FileManifest.parse(path.read_text())
    assert back == man and back.stored == [0] and back.discarded == [1]


def test_client_config(tmp_path):
    cfg = ClientConfig.from_config(parse_config("seeds = a:1, b:2\nparallelism = 4\ntimeout_ms = 1500\n",
                                                tmp_path / "c.conf"))
    assert cfg.seeds == ["a:1", "b:2"] and cfg.parallelism == 4 and cfg.timeout == 1.5
    with pytest.raises(ConfigError):
        ClientConfig.from_config(parse_config("parallelism = 2\n"))


def test_decode_benchmark_runs(deploy):
    res = decode_benchmark(80_000, deploy, 2, trials=3)
    assert res.trials == 3 and res.rate_mb_s > 0 and res.xors > 0
    with pytest.raises(ValueError):
        decode_benchmark(1000, deploy, 4, trials=1)


# ---------------------------------------------------------------------------
# loopback cluster


@pytest.fixture(scope="module")
def cluster(tmp_path_factory):
    addrs = spread_addresses(FILE, 14)
    c = Cluster(tmp_path_factory.mktemp("cluster"), addrs, GossipConfig(t_min=1.0, t_max=2.0))
    c.start()
    yield c
    c.stop()


def test_spread_addresses_are_distinct(cluster, deploy):
    from ldpcstore.placement import host_id, placement_plan
    plan = placement_plan(FILE, 8, 6, [host_id(a) for a in cluster.addresses])
    assert not plan.collisions
    assert [h for _, h in plan] == [host_id(a) for a in cluster.addresses]


def test_put_get_roundtrip(cluster, deploy, tmp_path):
    c = make_client(cluster, deploy)
    data = random.Random(3).randbytes(300_001)
    src = tmp_path / "src.bin"
    src.write_bytes(data)
    man = c.put_file(src, FILE)
    assert len(man.stored) == 14 and not man.discarded
    stats = c.get_file(FILE, tmp_path / "out.bin")
    assert (tmp_path / "out.bin").read_bytes() == data
    assert stats.xors == 0


def test_put_tolerates_three_failures(cluster, deploy):
    c = make_client(cluster, deploy, retries=0)
    hosts = c.hosts
    data = random.Random(4).randbytes(5000)
    victims = [1, 8, 12]
    for i in victims:
        cluster.kill(i)
    try:
        man = c.put_bytes(data, FILE)
        assert sorted(man.discarded) == victims
        got, _ = make_client(cluster, deploy, hosts=hosts, retries=0).get_bytes(FILE)
        assert got == data
        cluster.start(victims[0])  # 8 and 12 stay down, 0 and 3 join them
        cluster.kill(0)
        cluster.kill(3)
        with pytest.raises(TooManyUploadFailures) as ei:
            make_client(cluster, deploy, hosts=hosts, retries=0).put_bytes(data, FILE)
        assert len(ei.value.manifest.discarded) == 4
    finally:
        for i in range(14):
            if cluster.nodes[i] is None:
                cluster.start(i)


def test_get_unknown_file(cluster, deploy):
    with pytest.raises(NotFound):
        make_client(cluster, deploy).get_bytes("never-stored")


def test_get_resumes_with_range(cluster, deploy, monkeypatch):
    c = make_client(cluster, deploy)
    data = random.Random(5).randbytes(40_000)
    c.put_bytes(data, FILE)
    real = wire.get_chunk
    calls = []

    def flaky(address, name, start=None, end=None, timeout=5.0):
        calls.append((str(name), start))
        full = real(address, name, timeout=timeout)
        if str(name) == f"{FILE}.2" and start is None:
            raise wire.TransferError("connection reset", full[:1000])
        return real(address, name, start, end, timeout=timeout)

    monkeypatch.setattr(wire, "get_chunk", flaky)
    got, stats = c.get_bytes(FILE)
    assert got == data
    assert (f"{FILE}.2", 1000) in calls
    assert 2 in stats.fetched
