"""XOR + popcount matrix kernels over packed 64-bit words.

Both binary convolution and Hamming matching reduce to the same primitive:
given row-packed bit matrices a (P, W) and b (F, W), produce the (P, F)
matrix of popcount(a_i XOR b_j). The jitted path computes popcount with a
SWAR sequence that LLVM vectorizes (on AVX-512 machines it becomes native
vector popcount). The numpy path is a word-parallel reference kept both as
a fallback when numba is missing and as an independent cross-check.
"""

import numpy as np

try:
    from numba import njit

    HAVE_JIT = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_JIT = False

from .errors import DimensionError

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_MUL = np.uint64(0x0101010101010101)


if HAVE_JIT:

    @njit(cache=True, nogil=True)
    def _gemm_jit(a, b, out):  # pragma: no cover - exercised via wrapper
        p, w = a.shape
        f = b.shape[0]
        m1 = np.uint64(0x5555555555555555)
        m2 = np.uint64(0x3333333333333333)
        m4 = np.uint64(0x0F0F0F0F0F0F0F0F)
        mul = np.uint64(0x0101010101010101)
        s1 = np.uint64(1)
        s2 = np.uint64(2)
        s4 = np.uint64(4)
        s56 = np.uint64(56)
        for i in range(p):
            for j in range(f):
                acc = np.uint64(0)
                for k in range(w):
                    v = a[i, k] ^ b[j, k]
                    v = v - ((v >> s1) & m1)
                    v = (v & m2) + ((v >> s2) & m2)
                    v = (v + (v >> s4)) & m4
                    acc += (v * mul) >> s56
                out[i, j] = np.int32(acc)


def xor_popcount_gemm_ref(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Word-parallel numpy reference for the popcount GEMM."""
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"word counts differ: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int32)
    for j in range(b.shape[0]):
        out[:, j] = np.bitwise_count(a ^ b[j][None, :]).sum(axis=1, dtype=np.int64)
    return out


def xor_popcount_gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """popcount(a_i XOR b_j) for all row pairs; int32 of shape (len(a), len(b))."""
    if a.dtype != np.uint64 or b.dtype != np.uint64:
        raise DimensionError("xor_popcount_gemm expects uint64 word matrices")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"word counts differ: {a.shape[1]} vs {b.shape[1]}")
    if not HAVE_JIT:
        return xor_popcount_gemm_ref(a, b)
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int32)
    _gemm_jit(a, b, out)
    return out
