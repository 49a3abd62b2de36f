"""Constrained normalization for binarization-aware descriptor training.

A soft descriptor y must sit in (0, 1)^m and carry a fixed total mass k so
that exactly k bits survive thresholding. The entropy-regularized
projection of logits x onto that set has the closed form y = sigmoid(x + nu)
where nu is the unique root of

    g(nu) = sum_i sigmoid(x_i + nu) - k.

g is strictly increasing, so the root is found by bracketing and bisection.
The backward pass uses implicit differentiation of the constraint instead
of unrolling solver iterations:

    dL/dx_i = s_i * (dL/dy_i - sum_j dL/dy_j s_j / sum_j s_j),
    s_i = y_i (1 - y_i).

When every s_i underflows (all outputs pinned at 0 or 1) the Jacobian is
numerically zero; the backward pass then returns a zero gradient and
reports saturation rather than dividing by nothing.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InvalidInputError, InvalidParameterError

DEFAULT_TOL = 1e-9
MAX_BISECT_ITERS = 200
SATURATION_FLOOR = 1e-30


def sigmoid(t):
    """Numerically stable logistic function."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class SoftDescriptor:
    """Projected descriptor: y = sigmoid(x + nu), sum(y) = k."""

    x: np.ndarray
    y: np.ndarray
    nu: float
    k: int


def _validate(xs: np.ndarray, k: int):
    if xs.ndim != 2 or xs.shape[1] < 2:
        raise InvalidInputError(f"need vectors of length >= 2, got shape {xs.shape}")
    if not np.all(np.isfinite(xs)):
        raise InvalidInputError("logits contain non-finite values")
    m = xs.shape[1]
    if not (1 <= int(k) <= m - 1):
        raise InvalidParameterError(f"k must be in [1, {m - 1}], got {k}")


def _solve_nu(xs: np.ndarray, k: int, tol: float) -> np.ndarray:
    """Root of g per row. Bracket is analytic; expansion is a safety net."""
    b = xs.shape[0]
    m = xs.shape[1]
    t = np.log(k / (m - k))  # sigmoid(t) = k/m
    # At nu = t - max(x) every term is <= k/m, at nu = t - min(x) every term
    # is >= k/m, so g brackets the root between them.
    lo = t - xs.max(axis=1) - 1e-12
    hi = t - xs.min(axis=1) + 1e-12

    def g(nu):
        return sigmoid(xs + nu[:, None]).sum(axis=1) - k

    glo, ghi = g(lo), g(hi)
    width = hi - lo
    for _ in range(64):  # pure paranoia, the analytic bracket already holds
        bad = (glo > 0) | (ghi < 0)
        if not bad.any():
            break
        lo = np.where(bad, lo - width, lo)
        hi = np.where(bad, hi + width, hi)
        width = hi - lo
        glo, ghi = g(lo), g(hi)

    nu = 0.5 * (lo + hi)
    done = np.zeros(b, dtype=bool)
    for _ in range(MAX_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        nu = np.where(done, nu, mid)
        done = done | (np.abs(gm) <= tol)
        if done.all():
            break
        below = gm < 0
        lo = np.where(below & ~done, mid, lo)
        hi = np.where(~below & ~done, mid, hi)
    if not done.all():
        raise ConvergenceError(
            f"bisection did not reach |g| <= {tol} within {MAX_BISECT_ITERS} iterations"
        )
    return nu


def project_batch(xs, k: int, tol: float = DEFAULT_TOL):
    """Project rows of xs; returns (y, nu) with sum(y, axis=1) within tol of k."""
    xs = np.asarray(xs, dtype=np.float64)
    _validate(xs, k)
    if not (0 < tol < 1):
        raise InvalidParameterError(f"tol must be in (0, 1), got {tol}")
    nu = _solve_nu(xs, int(k), tol)
    return sigmoid(xs + nu[:, None]), nu


def project(x, k: int, tol: float = DEFAULT_TOL) -> SoftDescriptor:
    """Project one logit vector onto the constrained set."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError(f"project expects a vector, got shape {x.shape}")
    y, nu = project_batch(x[None, :], k, tol)
    return SoftDescriptor(x.copy(), y[0], float(nu[0]), int(k))


def project_backward(desc: SoftDescriptor, grad_out):
    """Gradient of a loss through the projection.

    Returns (grad_x, saturated). saturated is True only in the degenerate
    all-pinned case, where grad_x is identically zero.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != desc.y.shape:
        raise InvalidInputError(
            f"grad shape {grad_out.shape} does not match descriptor {desc.y.shape}"
        )
    s = desc.y * (1.0 - desc.y)
    total = s.sum()
    if total < SATURATION_FLOOR:
        return np.zeros_like(s), True
    grad_x = s * (grad_out - (grad_out * s).sum() / total)
    return grad_x, False


def top_k_threshold(values, k: int) -> np.ndarray:
    """0/1 mask keeping the k largest entries; ties resolve to lower index."""
    values = np.asarray(values)
    if values.ndim != 1:
        raise InvalidInputError(f"expected a vector, got shape {values.shape}")
    m = values.shape[0]
    if not (1 <= int(k) <= m):
        raise InvalidParameterError(f"k must be in [1, {m}], got {k}")
    order = np.argsort(-values, kind="stable")
    mask = np.zeros(m, dtype=np.uint8)
    mask[order[:k]] = 1
    return mask


def projection_topk_agreement(xs, k: int, tol: float = DEFAULT_TOL) -> float:
    """Fraction of rows whose top-k set is unchanged by the projection.

    The projection is a monotone per-element map, so this is 1.0 unless
    floating point broke the ordering; it exists as a cheap self-check.
    """
    xs = np.asarray(xs, dtype=np.float64)
    y, _ = project_batch(xs, k)
    hits = 0
    for row_x, row_y in zip(xs, y):
        a = np.flatnonzero(top_k_threshold(row_x, k))
        b = np.flatnonzero(top_k_threshold(row_y, k))
        hits += int(np.array_equal(a, b))
    return hits / xs.shape[0]


def soft_hamming_triplet(anchor, positive, negative, margin: float = 1.0) -> float:
    """Triplet loss under the soft Hamming distance

    d(u, v) = sum u (1 - v) + (1 - u) v,

    which agrees with the bit-level Hamming distance at binary endpoints.
    Inputs must lie in [0, 1].
    """
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    if not (a.shape == p.shape == n.shape):
        raise InvalidInputError("triplet vectors must share a shape")
    for v in (a, p, n):
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise InvalidInputError("triplet entries must lie in [0, 1]")
    if margin < 0:
        raise InvalidParameterError(f"margin must be non-negative, got {margin}")

    def d(u, v):
        return float(np.sum(u * (1.0 - v) + (1.0 - u) * v))

    return max(0.0, d(a, p) - d(a, n) + margin)
