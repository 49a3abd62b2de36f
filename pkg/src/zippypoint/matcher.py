"""Hamming-space descriptor matching over bit-packed rows.

Descriptors are rows of m sign bits packed 64 per uint64 word (canonical
zero padding past m). Distances are exact integers, so every route through
the code, any block split, and any thread count produce identical results.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from ._popcount import xor_popcount_gemm, xor_popcount_gemm_ref
from ._threads import run_chunks, thread_count
from .errors import DimensionError, InvalidInputError, InvalidParameterError
from .qtensor import pack_bits, unpack_bits, BitTensor, words_per_run

_ROW_BLOCK = 256  # query rows per GEMM block, keeps the tile in cache


@dataclass(frozen=True)
class DescriptorSet:
    """N packed descriptors of m bits each; words is (N, ceil(m/64)) uint64."""

    words: np.ndarray
    m: int

    def __post_init__(self):
        if self.words.dtype != np.uint64 or self.words.ndim != 2:
            raise InvalidInputError("words must be a 2-d uint64 array")
        if self.m < 1:
            raise InvalidParameterError(f"descriptor length must be positive, got {self.m}")
        if self.words.shape[1] != words_per_run(self.m):
            raise DimensionError(
                f"{self.words.shape[1]} words per row does not fit m={self.m}"
            )

    def __len__(self):
        return self.words.shape[0]

    @classmethod
    def from_bits(cls, bits) -> "DescriptorSet":
        """Rows of 0/1 values, any length."""
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise DimensionError(f"expected (n, m) bits, got {bits.shape}")
        t = pack_bits(bits)
        return cls(t.words, bits.shape[1])

    @classmethod
    def from_bytes(cls, raw: np.ndarray, m: int) -> "DescriptorSet":
        """Rows of m/8 packed bytes, little-endian bit order (the wire form)."""
        raw = np.asarray(raw, dtype=np.uint8)
        if m % 8 != 0:
            raise InvalidParameterError(f"byte form needs m divisible by 8, got {m}")
        if raw.ndim != 2 or raw.shape[1] != m // 8:
            raise DimensionError(f"expected (n, {m // 8}) bytes, got {raw.shape}")
        wpr = words_per_run(m)
        padded = np.zeros((raw.shape[0], wpr * 8), dtype=np.uint8)
        padded[:, : m // 8] = raw
        return cls(padded.view("<u8").astype(np.uint64, copy=False), m)

    def to_bytes(self) -> np.ndarray:
        """(n, m/8) uint8 rows; inverse of from_bytes."""
        if self.m % 8 != 0:
            raise InvalidParameterError(f"byte form needs m divisible by 8, got {self.m}")
        byts = np.ascontiguousarray(self.words).view(np.uint8)
        return byts.reshape(len(self), -1)[:, : self.m // 8].copy()

    def popcounts(self) -> np.ndarray:
        return np.bitwise_count(self.words).sum(axis=1, dtype=np.int64)


def hamming(a: DescriptorSet, i: int, b: DescriptorSet, j: int) -> int:
    """Distance between one pair of rows."""
    if a.m != b.m:
        raise DimensionError(f"descriptor lengths differ: {a.m} vs {b.m}")
    return int(np.bitwise_count(a.words[i] ^ b.words[j]).sum())


def hamming_matrix(
    query: DescriptorSet, ref: DescriptorSet, threads: int | None = None
) -> np.ndarray:
    """(n_query, n_ref) int32 distance matrix, word-parallel popcount route."""
    if query.m != ref.m:
        raise DimensionError(f"descriptor lengths differ: {query.m} vs {ref.m}")
    nq = len(query)
    out = np.empty((nq, len(ref)), dtype=np.int32)
    if nq == 0 or len(ref) == 0:
        return out
    qw = np.ascontiguousarray(query.words)
    rw = np.ascontiguousarray(ref.words)

    def block(s, e):
        out[s:e] = xor_popcount_gemm(qw[s:e], rw)

    run_chunks(block, nq, _ROW_BLOCK, thread_count(threads))
    return out


def hamming_matrix_bitloop(query: DescriptorSet, ref: DescriptorSet) -> np.ndarray:
    """Reference route: one pass per bit position instead of per word.

    Kept for cross-checks and as the slow baseline in benchmarks.
    """
    if query.m != ref.m:
        raise DimensionError(f"descriptor lengths differ: {query.m} vs {ref.m}")
    qb = unpack_bits(BitTensor((len(query), query.m), query.words)) if len(query) else None
    rb = unpack_bits(BitTensor((len(ref), ref.m), ref.words)) if len(ref) else None
    out = np.zeros((len(query), len(ref)), dtype=np.int32)
    if not len(query) or not len(ref):
        return out
    for bit in range(query.m):
        out += qb[:, bit : bit + 1] != rb[None, :, bit]
    return out


def match_mutual_nn(
    query: DescriptorSet,
    ref: DescriptorSet,
    max_dist: int | None = None,
    threads: int | None = None,
) -> np.ndarray:
    """Mutual nearest neighbors as an (n, 3) int32 array.

    Columns are (query_idx, ref_idx, distance), sorted by query index.
    Nearest-neighbor ties resolve to the lowest index on both sides, so
    the result is a function of the descriptor contents alone.
    """
    if max_dist is None:
        max_dist = query.m
    if max_dist < 0:
        raise InvalidParameterError(f"max_dist must be non-negative, got {max_dist}")
    if len(query) == 0 or len(ref) == 0:
        return np.empty((0, 3), dtype=np.int32)
    d = hamming_matrix(query, ref, threads)
    fwd = d.argmin(axis=1)  # first minimum = lowest ref index
    bwd = d.argmin(axis=0)  # first minimum = lowest query index
    qi = np.arange(len(query))
    mutual = bwd[fwd] == qi
    dist = d[qi, fwd]
    keep = mutual & (dist <= max_dist)
    out = np.stack([qi[keep], fwd[keep], dist[keep]], axis=1).astype(np.int32)
    return out


@dataclass
class MatchBenchReport:
    n_query: int
    n_ref: int
    m: int
    reps: int
    seconds: dict = field(default_factory=dict)  # route -> median wall time
    pairs_per_second: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "n_query": self.n_query,
            "n_ref": self.n_ref,
            "m": self.m,
            "reps": self.reps,
            "seconds": dict(self.seconds),
            "pairs_per_second": dict(self.pairs_per_second),
        }


_BENCH_ROUTES = {
    "word": lambda q, r: hamming_matrix(q, r),
    "word_numpy": lambda q, r: xor_popcount_gemm_ref(q.words, r.words),
    "bitloop": hamming_matrix_bitloop,
}


def bench_match(
    query: DescriptorSet,
    ref: DescriptorSet,
    reps: int = 5,
    warmup: int = 1,
    routes=("word", "bitloop"),
) -> MatchBenchReport:
    """Time full distance-matrix computation per route; median of reps."""
    if reps < 1:
        raise InvalidParameterError(f"reps must be >= 1, got {reps}")
    report = MatchBenchReport(len(query), len(ref), query.m, reps)
    pairs = len(query) * len(ref)
    baseline = None
    for name in routes:
        fn = _BENCH_ROUTES[name]
        got = fn(query, ref)  # doubles as warmup and a route cross-check
        for _ in range(max(warmup - 1, 0)):
            fn(query, ref)
        if baseline is None:
            baseline = got
        elif not np.array_equal(np.asarray(got), np.asarray(baseline)):
            raise AssertionError(f"route {name} disagrees with {routes[0]}")
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn(query, ref)
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        report.seconds[name] = med
        report.pairs_per_second[name] = pairs / med if med > 0 else float("inf")
    return report
