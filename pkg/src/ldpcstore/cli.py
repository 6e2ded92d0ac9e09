"""``ldpcstore`` command line.

Exit codes:
    0  success
    1  unexpected error
    2  usage error
    3  file not decodable from the available chunks
    4  file not found
    5  too many chunk uploads failed
    6  no seed host reachable
    7  bad config, graph or input file
    8  simulation did not converge
    9  code too large for exhaustive evaluation
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import signal
import sys
import time
from pathlib import Path

from . import availability as av
from .chunk import ChunkFormatError, ChunkHeader, build_chunk, parse_chunk, split_file
from .client import Client, ClientConfig, ChunkMissing, NotFound, TooManyUploadFailures, assemble, decode_sweep
from .codec import (
    GraphFormatError,
    NotDecodable,
    SizeLimitExceeded,
    TannerGraph,
    deployment_graph,
    encode,
    evaluate,
    search_best_graph,
)
from .config import ConfigError, load_config
from .membership import AllSeedsUnreachable
from .node import serve
from .simharness import SimConfig, run_sim

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NOT_DECODABLE = 3
EXIT_NOT_FOUND = 4
EXIT_UPLOAD = 5
EXIT_UNREACHABLE = 6
EXIT_CONFIG = 7
EXIT_NO_CONVERGENCE = 8
EXIT_SIZE_LIMIT = 9


def _indices(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _load_graph(path: str | None) -> TannerGraph:
    return TannerGraph.load(path) if path else deployment_graph()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gencode(args) -> int:
    t0 = time.perf_counter()
    res = search_best_graph(args.n, args.m, (args.p_min, args.p_max), args.budget, args.seed,
                            samples=args.samples)
    res.graph.save(args.output)
    met = res.metrics
    print(f"graph written to {args.output}")
    print(f"f_max_blocks = {met.f_max_blocks}  (f_max = {met.f_max(args.n):.4f})")
    print(f"f_avg = {met.f_avg:.4f} +- {met.f_avg_err:.4f}  (s = {met.samples})")
    print(f"candidates = {res.candidates}  elapsed = {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_evalcode(args) -> int:
    g = TannerGraph.load(args.graph)
    met = evaluate(g, args.samples, args.seed)
    print(f"n = {g.n}  m = {g.m}  edges = {g.edge_count}  fingerprint = {g.fingerprint:016x}")
    print(f"f_max_blocks = {met.f_max_blocks}  (f_max = {met.f_max(g.n):.4f})")
    print(f"f_avg = {met.f_avg:.4f} +- {met.f_avg_err:.4f}  (s = {met.samples})")
    if args.exact_availability:
        for mu in args.mu:
            exact = av.exact_graph_availability(g, mu)
            lo = av.ldpc_availability_bound(mu, g.n, g.m, met.f_max_blocks)
            hi = av.erasure_availability(mu, g.n, g.m)
            print(f"mu = {mu}: availability = {exact:.12g}  failure = {av.exact_graph_failure(g, mu):.6e}  "
                  f"bounds = [{lo:.12g}, {hi:.12g}]")
    return EXIT_OK


def cmd_curves(args) -> int:
    cfg = av.CurveConfig(fig=args.fig, mus=tuple(args.mu or ()))
    text = av.curves_to_csv(av.emit_failure_curves(cfg))
    if args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
        print(f"wrote {text.count(chr(10)) - 1} rows to {args.output}")
    return EXIT_OK


def cmd_encode(args) -> int:
    g = _load_graph(args.graph)
    src = Path(args.file)
    data = src.read_bytes()
    blocks = split_file(data, g.n)
    blocks += encode(g, blocks)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    fp = g.fingerprint
    for i, block in enumerate(blocks):
        (out / f"{src.name}.{i}").write_bytes(build_chunk(ChunkHeader(len(data), g.n, g.m, i, fp), block))
    print(f"encoded {len(data)} bytes into {len(blocks)} chunks in {out}")
    print(f"sha256 {_sha256(data)}")
    return EXIT_OK


def _chunk_files(directory: Path) -> dict[int, Path]:
    found: dict[int, Path] = {}
    for p in sorted(directory.iterdir()):
        stem, _, idx = p.name.rpartition(".")
        if stem and idx.isdigit() and p.is_file():
            found.setdefault(int(idx), p)
    return found


def cmd_decode(args) -> int:
    directory = Path(args.directory)
    files = _chunk_files(directory)
    if not files:
        print(f"no chunks found in {directory}", file=sys.stderr)
        return EXIT_NOT_FOUND
    if args.graph:
        g = TannerGraph.load(args.graph)
    else:
        g = deployment_graph()
        some = ChunkHeader.unpack(next(iter(files.values())).read_bytes()[:36])
        if some.graph_fp != g.fingerprint:
            print("chunks were not made with the default graph; pass --graph", file=sys.stderr)
            return EXIT_CONFIG
    drop = set(args.drop or ())

    def fetch(i: int) -> bytes:
        if i in drop or i not in files:
            raise ChunkMissing(i, True)
        return files[i].read_bytes()

    data, stats = assemble(g, fetch)
    Path(args.output).write_bytes(data)
    print(f"decoded {len(data)} bytes from chunks {sorted(stats.fetched)} with {stats.xors} XORs")
    print(f"sha256 {_sha256(data)}")
    return EXIT_OK


def cmd_serve(args) -> int:
    node = serve(load_config(args.config))
    print(f"serving on {node.address}", flush=True)
    stop = lambda *_: node._stop.set()  # noqa: E731
    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    node.wait()
    node.stop()
    return EXIT_OK


def _client(args) -> Client:
    cfg = ClientConfig.from_config(load_config(args.config))
    graph = TannerGraph.load(cfg.graph_file) if cfg.graph_file else deployment_graph()
    return Client(cfg, graph)


def cmd_put(args) -> int:
    client = _client(args)
    man = client.put_file(args.local, args.name)
    print(f"stored {args.name}: {len(man.stored)} chunks stored, {len(man.discarded)} discarded")
    return EXIT_OK


def cmd_get(args) -> int:
    client = _client(args)
    stats = client.get_file(args.name, args.local)
    data = Path(args.local).read_bytes()
    print(f"fetched {args.name}: {len(data)} bytes, chunks {sorted(stats.fetched)}, {stats.xors} XORs")
    print(f"sha256 {_sha256(data)}")
    return EXIT_OK


def cmd_hosts(args) -> int:
    client = _client(args)
    sys.stdout.write(client.refresh_hosts().serialize())
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = SimConfig.from_config(load_config(args.config))
    report = run_sim(cfg)
    report.write(args.output)
    sys.stdout.write(report.summary())
    if report.convergence_rounds is None:
        print(f"error: host lists did not converge within {cfg.round_cap} rounds", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def cmd_bench(args) -> int:
    g = _load_graph(args.graph)
    print("missing,trials,size_bytes,mean_s,rate_mb_s")
    for k, res in zip(args.missing, decode_sweep(args.size, g, args.missing, args.trials, args.seed)):
        print(f"{k},{res.trials},{res.file_size},{res.mean_seconds:.6f},{res.rate_mb_s:.2f}", flush=True)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldpcstore", description="Distributed file storage with small LDPC codes.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gencode", help="search for a good (n, m) graph")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--budget", type=int, default=200000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--p-min", type=float, default=0.4)
    s.add_argument("--p-max", type=float, default=0.6)
    s.add_argument("--samples", type=int, default=10000, help="samples for the reported f_avg")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_gencode)

    s = sub.add_parser("evalcode", help="certify a graph")
    s.add_argument("graph")
    s.add_argument("--samples", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--exact-availability", action="store_true")
    s.add_argument("--mu", type=_floats, default=[0.95])
    s.set_defaults(func=cmd_evalcode)

    s = sub.add_parser("curves", help="failure-rate curves as CSV")
    s.add_argument("--fig", type=int, choices=(1, 4), required=True,
                   help="1: failure vs stretch, replication against an LDPC code; "
                        "4: failure vs n for erasure codes at fixed rates")
    s.add_argument("--mu", type=_floats)
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(func=cmd_curves)

    s = sub.add_parser("encode", help="encode a local file into chunk files")
    s.add_argument("file")
    s.add_argument("--graph")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="rebuild a file from chunk files")
    s.add_argument("directory")
    s.add_argument("--graph")
    s.add_argument("--drop", type=_indices, help="chunk indices to treat as lost, e.g. 0,5,9")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("serve", help="run a storage node")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("put", help="store a local file")
    s.add_argument("local")
    s.add_argument("name")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_put)

    s = sub.add_parser("get", help="fetch a stored file")
    s.add_argument("name")
    s.add_argument("local")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_get)

    s = sub.add_parser("hosts", help="print the host list from the seeds")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_hosts)

    s = sub.add_parser("simulate", help="run a cluster simulation")
    s.add_argument("--config", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("bench", help="benchmarks")
    bsub = s.add_subparsers(dest="bench", required=True)
    b = bsub.add_parser("decode", help="read rate versus missing data chunks")
    b.add_argument("--size", type=int, default=500_000_000)
    b.add_argument("--missing", type=_indices, default=[0, 1, 2, 3])
    b.add_argument("--trials", type=int, default=50)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--graph")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NotDecodable as exc:
        print(f"error: not decodable: missing data chunks {','.join(map(str, exc.missing))} ({exc})", file=sys.stderr)
        return EXIT_NOT_DECODABLE
    except (NotFound, FileNotFoundError) as exc:
        print(f"error: not found: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except TooManyUploadFailures as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UPLOAD
    except AllSeedsUnreachable as exc:
        print(f"error: no seed reachable: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except (ConfigError, GraphFormatError, ChunkFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SizeLimitExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZE_LIMIT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # last resort; keep the documented code
        logging.getLogger(__name__).debug("unexpected failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
