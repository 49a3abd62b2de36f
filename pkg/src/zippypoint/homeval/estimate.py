"""Homography fitting: normalized DLT inside a seeded RANSAC loop."""

from dataclasses import dataclass

import numpy as np

from ..errors import EstimationError, InvalidInputError, InvalidParameterError
from .homography import Homography, warp_points

# ratio of the two smallest singular values of the DLT system below which
# the point configuration does not pin down a unique homography
_DEGENERACY_RATIO = 1e-10


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    inlier_px: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidParameterError("iterations must be >= 1")
        if not self.inlier_px > 0:
            raise InvalidParameterError("inlier_px must be > 0")


def _normalize(pts: np.ndarray):
    """Similarity T moving the centroid to 0 with mean radius sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise EstimationError("points are coincident")
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return t, (pts - centroid) * s


def fit_dlt(pts_a, pts_b) -> Homography:
    """Direct linear transform on >= 4 correspondences, Hartley normalized."""
    pa = np.asarray(pts_a, dtype=np.float64)
    pb = np.asarray(pts_b, dtype=np.float64)
    n = len(pa)
    if n < 4:
        raise EstimationError(f"need at least 4 pairs, got {n}")
    ta, na = _normalize(pa)
    tb, nb = _normalize(pb)

    a = np.zeros((2 * n, 9))
    x, y = na[:, 0], na[:, 1]
    u, v = nb[:, 0], nb[:, 1]
    a[0::2, 0], a[0::2, 1], a[0::2, 2] = -x, -y, -1.0
    a[0::2, 6], a[0::2, 7], a[0::2, 8] = u * x, u * y, u
    a[1::2, 3], a[1::2, 4], a[1::2, 5] = -x, -y, -1.0
    a[1::2, 6], a[1::2, 7], a[1::2, 8] = v * x, v * y, v

    _, sv, vt = np.linalg.svd(a)
    if sv[-2] <= _DEGENERACY_RATIO * sv[0]:
        raise EstimationError("degenerate configuration (collinear or repeated points)")
    hn = vt[-1].reshape(3, 3)
    try:
        return Homography(np.linalg.inv(tb) @ hn @ ta)
    except InvalidInputError as e:
        raise EstimationError(f"DLT produced an unusable matrix: {e}") from None


def _reprojection_errors(h: Homography, pts_a, pts_b) -> np.ndarray:
    warped, valid = warp_points(h, pts_a)
    err = np.sqrt(((warped - pts_b) ** 2).sum(axis=1))
    err[~valid] = np.inf
    return err


def estimate_homography(pts_a, pts_b, cfg: RansacConfig | None = None) -> Homography:
    """Robust fit mapping pts_a onto pts_b.

    Exactly 4 pairs solve directly. More run seeded RANSAC over 4-point
    hypotheses, then a DLT refit on the winning inlier set. Determinism:
    a hypothesis replaces the incumbent only on a strictly higher inlier
    count, so a fixed seed fixes the result.
    """
    pa = np.asarray(pts_a, dtype=np.float64)
    pb = np.asarray(pts_b, dtype=np.float64)
    if pa.ndim != 2 or pa.shape[1] != 2 or pa.shape != pb.shape:
        raise InvalidInputError(f"point arrays must match as (n, 2), got {pa.shape} vs {pb.shape}")
    if not (np.all(np.isfinite(pa)) and np.all(np.isfinite(pb))):
        raise InvalidInputError("points must be finite")
    n = len(pa)
    if n < 4:
        raise EstimationError(f"need at least 4 correspondences, got {n}")
    cfg = cfg or RansacConfig()
    if n == 4:
        return fit_dlt(pa, pb)

    rng = np.random.default_rng(cfg.seed)
    thr = cfg.inlier_px
    best_mask = None
    best_count = 0
    for _ in range(cfg.iterations):
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = fit_dlt(pa[idx], pb[idx])
        except EstimationError:
            continue
        mask = _reprojection_errors(h, pa, pb) <= thr
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_h = count, mask, h
            if count == n:
                break
    if best_mask is None or best_count < 4:
        raise EstimationError("RANSAC found no 4-inlier hypothesis")
    h, mask = best_h, best_mask
    for _ in range(3):  # refit, then let the inlier set settle
        try:
            refit = fit_dlt(pa[mask], pb[mask])
        except EstimationError:
            break
        h = refit
        nxt = _reprojection_errors(h, pa, pb) <= thr
        if nxt.sum() < 4 or np.array_equal(nxt, mask):
            break
        mask = nxt
    return h
