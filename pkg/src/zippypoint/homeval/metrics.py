"""Pair metrics for keypoint detectors under a known homography.

Definitions follow the SuperPoint evaluation family. All metrics
restrict keypoints to the shared visible region: a keypoint counts only
if its warp lands inside the other image's bounds. A metric whose
denominator is empty is NaN; aggregation reports how many pairs
contributed.
"""

import json
import math
from dataclasses import dataclass, fields

import numpy as np

from ..errors import InvalidInputError, InvalidParameterError
from .homography import Homography, warp_points

DEFAULT_EPS_PX = 3.0
COR_THRESHOLDS = (1.0, 3.0, 5.0)


def _keypoints(det) -> np.ndarray:
    pts = det.keypoints if hasattr(det, "keypoints") else det
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidInputError(f"keypoints must be (n, 2), got {pts.shape}")
    return pts


def _dims(det, override):
    if override is not None:
        return int(override[0]), int(override[1])
    if hasattr(det, "image_size"):
        return int(det.image_size[0]), int(det.image_size[1])
    raise InvalidInputError("image dims needed: pass detections or explicit dims")


def _inside(pts: np.ndarray, dims) -> np.ndarray:
    w, h = dims
    return (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)


def _shared(pa, pb, h: Homography, dims_a, dims_b):
    """Warps and shared-region masks for both directions."""
    wa, va = warp_points(h, pa)
    wb, vb = warp_points(h.inverse(), pb)
    in_a = va & _inside(wa, dims_b)
    in_b = vb & _inside(wb, dims_a)
    return wa, wb, in_a, in_b


def _min_dists(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each src point to its nearest dst point."""
    if len(dst) == 0:
        return np.full(len(src), np.inf)
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def repeatability(det_a, det_b, h: Homography, eps_px=DEFAULT_EPS_PX,
                  dims_a=None, dims_b=None) -> float:
    """Fraction of shared-region keypoints re-detected within eps_px.

    Computed in both warp directions and averaged, so swapping the
    arguments (with h inverted) gives the same number. NaN when neither
    image has a keypoint in the shared region.
    """
    if not eps_px > 0:
        raise InvalidParameterError("eps_px must be > 0")
    pa, pb = _keypoints(det_a), _keypoints(det_b)
    da, db = _dims(det_a, dims_a), _dims(det_b, dims_b)
    wa, wb, in_a, in_b = _shared(pa, pb, h, da, db)
    fracs = []
    if in_a.any():
        fracs.append(float((_min_dists(wa[in_a], pb[in_b]) <= eps_px).mean()))
    if in_b.any():
        fracs.append(float((_min_dists(wb[in_b], pa[in_a]) <= eps_px).mean()))
    return float(np.mean(fracs)) if fracs else math.nan


def localization_error(det_a, det_b, h: Homography, eps_px=DEFAULT_EPS_PX,
                       dims_a=None, dims_b=None) -> float:
    """Mean distance over the repeatable pairs of both directions."""
    if not eps_px > 0:
        raise InvalidParameterError("eps_px must be > 0")
    pa, pb = _keypoints(det_a), _keypoints(det_b)
    da, db = _dims(det_a, dims_a), _dims(det_b, dims_b)
    wa, wb, in_a, in_b = _shared(pa, pb, h, da, db)
    dists = np.concatenate([
        _min_dists(wa[in_a], pb[in_b]),
        _min_dists(wb[in_b], pa[in_a]),
    ])
    dists = dists[dists <= eps_px]
    return float(dists.mean()) if len(dists) else math.nan


def matching_score(det_a, det_b, h: Homography, matches, eps_px=DEFAULT_EPS_PX,
                   dims_a=None, dims_b=None) -> float:
    """Correct matches over the smaller shared-region keypoint count.

    A match (i, j) is correct when both endpoints sit in the shared
    region and warp(h, a_i) lies within eps_px of b_j.
    """
    if not eps_px > 0:
        raise InvalidParameterError("eps_px must be > 0")
    pa, pb = _keypoints(det_a), _keypoints(det_b)
    da, db = _dims(det_a, dims_a), _dims(det_b, dims_b)
    wa, _, in_a, in_b = _shared(pa, pb, h, da, db)
    denom = min(int(in_a.sum()), int(in_b.sum()))
    if denom == 0:
        return math.nan
    m = np.asarray(matches)
    if m.size == 0:
        return 0.0
    if m.ndim != 2 or m.shape[1] < 2:
        raise InvalidInputError(f"matches must be (n, >=2) index rows, got {m.shape}")
    ia = m[:, 0].astype(np.int64)
    ib = m[:, 1].astype(np.int64)
    dist = np.sqrt(((wa[ia] - pb[ib]) ** 2).sum(axis=1))
    correct = in_a[ia] & in_b[ib] & (dist <= eps_px)
    return float(correct.sum() / denom)


def _corners(dims) -> np.ndarray:
    w, h = dims
    return np.array(
        [[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]]
    )


def corner_error(est: Homography, true: Homography, dims) -> float:
    """Mean distance between the four image corners under the two warps."""
    c = _corners(dims)
    we, ve = warp_points(est, c)
    wt, vt = warp_points(true, c)
    if not (ve.all() and vt.all()):
        return math.inf
    return float(np.sqrt(((we - wt) ** 2).sum(axis=1)).mean())


def homography_accuracy(est: Homography, true: Homography, dims,
                        thresholds=COR_THRESHOLDS):
    """Cor-t flag per threshold: 1 when mean corner error <= t."""
    err = corner_error(est, true, dims)
    return tuple(int(err <= t) for t in thresholds)


@dataclass(frozen=True)
class MetricReport:
    """Aggregated pair metrics plus how much data produced them.

    The cor rates average the per-pair flags over every pair (a failed
    estimate scores 0); repeatability, localization error, and matching
    score average only pairs where they were defined, with the counts
    giving how many that was.
    """

    repeatability: float
    localization_error: float
    cor1: float
    cor3: float
    cor5: float
    matching_score: float
    n_pairs: int
    n_repeat_pairs: int
    n_match_pairs: int
    mean_keypoints: float

    def __post_init__(self):
        for name in ("repeatability", "cor1", "cor3", "cor5", "matching_score"):
            v = getattr(self, name)
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {v}")
        if not math.isnan(self.localization_error) and self.localization_error < 0:
            raise InvalidInputError("localization_error must be >= 0")
        if self.n_pairs < 1:
            raise InvalidInputError("a report needs at least one pair")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def as_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={v!r}")
        return "\n".join(lines) + "\n"

    def as_json(self) -> str:
        safe = {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in self.as_dict().items()}
        return json.dumps(safe, indent=2, sort_keys=True) + "\n"
