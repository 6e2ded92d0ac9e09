"""Availability of replicated, erasure coded and LDPC coded files.

Hosts are up independently with probability ``mu``. Failure probabilities
(1 - A) are summed directly over the failing tail so that values down to
1e-12 and below keep full relative precision.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

from .codec import TABLE_SIZE_LIMIT, SizeLimitExceeded, TannerGraph, decodable_table

EXACT_BINOMIAL_LIMIT = 64


def _check_mu(mu: float) -> None:
    if not 0.0 <= mu <= 1.0 or math.isnan(mu):
        raise ValueError(f"availability mu must be within [0, 1], got {mu}")


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _binom_pmf(total: int, k: int, mu: float) -> float:
    if mu == 0.0:
        return 1.0 if k == 0 else 0.0
    if mu == 1.0:
        return 1.0 if k == total else 0.0
    if total <= EXACT_BINOMIAL_LIMIT:
        return math.comb(total, k) * mu**k * (1.0 - mu) ** (total - k)
    return math.exp(_log_comb(total, k) + k * math.log(mu) + (total - k) * math.log1p(-mu))


def binomial_sum(total: int, ks: Iterable[int], mu: float) -> float:
    return math.fsum(_binom_pmf(total, k, mu) for k in ks)


def replication_failure(mu: float, copies: int) -> float:
    _check_mu(mu)
    if copies < 1 or int(copies) != copies:
        raise ValueError("copies must be a positive integer")
    return (1.0 - mu) ** int(copies)


def replication_availability(mu: float, copies: int) -> float:
    """Probability that at least one of ``copies`` replicas is up."""
    _check_mu(mu)
    if copies < 1 or int(copies) != copies:
        raise ValueError("copies must be a positive integer")
    return binomial_sum(int(copies), range(1, int(copies) + 1), mu)


def _check_code(n: int, m: int) -> None:
    if n < 1 or m < 0:
        raise ValueError(f"need n >= 1 and m >= 0, got n={n}, m={m}")


def erasure_failure(mu: float, n: int, m: int) -> float:
    _check_mu(mu)
    _check_code(n, m)
    return binomial_sum(n + m, range(0, n), mu)


def erasure_availability(mu: float, n: int, m: int) -> float:
    """Probability that at least n of the n+m blocks are up (ideal MDS code)."""
    _check_mu(mu)
    _check_code(n, m)
    return binomial_sum(n + m, range(n, n + m + 1), mu)


def code_rate(n: int, m: int) -> Fraction:
    _check_code(n, m)
    return Fraction(n, n + m)


def ldpc_equivalent_params(f: float, n: int, m: int) -> tuple[int, int]:
    """Ideal-code parameters (n', m') matching an overhead factor f.

    n' = f*n is rounded up so that the comparison stays conservative;
    n' + m' = n + m.
    """
    _check_code(n, m)
    if f < 1:
        raise ValueError("overhead factor must be >= 1")
    # round() guards against f*n landing a hair above an integer
    fn = f * n
    n_eq = round(fn) if abs(fn - round(fn)) < 1e-9 else math.ceil(fn)
    if n_eq > n + m:
        raise ValueError(f"f*n = {fn} exceeds n+m = {n + m}")
    return n_eq, n + m - n_eq


def ldpc_failure_bound(mu: float, n: int, m: int, f_max_blocks: int) -> float:
    _check_mu(mu)
    _check_code(n, m)
    if not n <= f_max_blocks <= n + m:
        raise ValueError("f_max_blocks must lie in [n, n+m]")
    return erasure_failure(mu, f_max_blocks, n + m - f_max_blocks)


def ldpc_availability_bound(mu: float, n: int, m: int, f_max_blocks: int) -> float:
    """Availability guaranteed by a code decoding from any f_max_blocks blocks."""
    _check_mu(mu)
    _check_code(n, m)
    if not n <= f_max_blocks <= n + m:
        raise ValueError("f_max_blocks must lie in [n, n+m]")
    return erasure_availability(mu, f_max_blocks, n + m - f_max_blocks)


def _subset_weights(size: int, mu: float) -> np.ndarray:
    counts = np.bitwise_count(np.arange(1 << size, dtype=np.uint64)).astype(np.int64)
    per_count = np.array([mu**k * (1.0 - mu) ** (size - k) for k in range(size + 1)])
    return per_count[counts]


def exact_graph_failure(graph: TannerGraph, mu: float) -> float:
    _check_mu(mu)
    if graph.size > min(20, TABLE_SIZE_LIMIT):
        raise SizeLimitExceeded(f"n+m={graph.size} exceeds the exhaustive limit of 20")
    table = decodable_table(graph)
    return math.fsum(_subset_weights(graph.size, mu)[~table].tolist())


def exact_graph_availability(graph: TannerGraph, mu: float) -> float:
    """Probability that the up blocks of ``graph`` peel-decode, by enumeration."""
    _check_mu(mu)
    if graph.size > min(20, TABLE_SIZE_LIMIT):
        raise SizeLimitExceeded(f"n+m={graph.size} exceeds the exhaustive limit of 20")
    table = decodable_table(graph)
    return math.fsum(_subset_weights(graph.size, mu)[table].tolist())


# ---------------------------------------------------------------------------
# curve emission


@dataclass
class CurveConfig:
    fig: int
    mus: tuple[float, ...] = ()
    ldpc_n: int = 8
    ldpc_f: float = 1.1
    max_stretch: float = 5.0
    max_copies: int = 5
    rates: tuple[tuple[int, int], ...] = ((1, 3), (1, 2), (4, 7), (2, 3))
    n_range: tuple[int, int] = (1, 40)

    def __post_init__(self):
        if self.fig not in (1, 4):
            raise ValueError("fig must be 1 or 4")
        if not self.mus:
            self.mus = (0.5, 0.95, 0.99) if self.fig == 1 else (0.95,)
        for mu in self.mus:
            _check_mu(mu)
        lo, hi = self.n_range
        if lo < 1 or hi < lo:
            raise ValueError("bad n_range")


@dataclass(frozen=True)
class CurvePoint:
    scheme: str
    mu: float
    x: float
    failure: float


def _fig1(cfg: CurveConfig) -> list[CurvePoint]:
    rows = []
    n = cfg.ldpc_n
    for mu in cfg.mus:
        for copies in range(1, cfg.max_copies + 1):
            rows.append(CurvePoint("replication", mu, float(copies), replication_failure(mu, copies)))
        m = 0
        while (n + m) / n <= cfg.max_stretch + 1e-12:
            n_eq = ldpc_equivalent_params(cfg.ldpc_f, n, m)[0] if cfg.ldpc_f * n <= n + m + 1e-9 else None
            if n_eq is not None:
                rows.append(CurvePoint(f"ldpc_n{n}_f{cfg.ldpc_f:g}", mu, (n + m) / n, erasure_failure(mu, n_eq, n + m - n_eq)))
            m += 1
    return rows


def _fig4(cfg: CurveConfig) -> list[CurvePoint]:
    rows = []
    lo, hi = cfg.n_range
    for mu in cfg.mus:
        for num, den in cfg.rates:
            for n in range(lo, hi + 1):
                # m must make n/(n+m) exactly the rate
                total = Fraction(n) * den / num
                if total.denominator != 1:
                    continue
                m = int(total) - n
                rows.append(CurvePoint(f"rate_{num}/{den}", mu, float(n), erasure_failure(mu, n, m)))
    return rows


def emit_failure_curves(cfg: CurveConfig) -> list[CurvePoint]:
    return _fig1(cfg) if cfg.fig == 1 else _fig4(cfg)


def curves_to_csv(points: Iterable[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "mu", "x", "failure"])
    for p in points:
        w.writerow([p.scheme, repr(p.mu), f"{p.x:.12g}", f"{p.failure:.15e}"])
    return buf.getvalue()
