"""Sequence-level evaluation: dataset reading, pair loop, aggregation.

The on-disk format is the HPatches layout: a directory with images
1.ppm .. n.ppm (PGM and PNG also accepted) where image 1 is the
reference, plus text files H_1_k holding the 3x3 homography from image 1
to image k as nine whitespace-separated numbers.
"""

import math
import os

import numpy as np

from .._threads import run_chunks, thread_count
from ..errors import EstimationError, FormatError, InvalidInputError, InvalidParameterError
from ..imgio import read_image, write_pnm
from .._io import atomic_write_text
from ..matcher import match_mutual_nn
from ..netgraph import decode as decode_heads
from ..netgraph import forward, forward_fp, synthetic_image
from .estimate import RansacConfig, estimate_homography
from .homography import AugmentationConfig, Homography, apply_photometric, sample_homography, warp_image
from .metrics import (
    COR_THRESHOLDS,
    DEFAULT_EPS_PX,
    MetricReport,
    homography_accuracy,
    localization_error,
    matching_score,
    repeatability,
)

DEFAULT_KEYPOINT_BUDGET = 300
_IMAGE_EXTS = (".ppm", ".pgm", ".png")


def _read_h_file(path) -> Homography:
    with open(path) as f:
        tokens = f.read().split()
    if len(tokens) != 9:
        raise FormatError(f"{path}: expected 9 numbers, found {len(tokens)}")
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise FormatError(f"{path}: non-numeric homography entry") from None
    try:
        return Homography(np.array(vals).reshape(3, 3))
    except InvalidInputError as e:
        raise FormatError(f"{path}: {e}") from None


def _find_image(root, index):
    for ext in _IMAGE_EXTS:
        p = os.path.join(root, f"{index}{ext}")
        if os.path.exists(p):
            return p
    return None


def load_hpatches_sequence(path):
    """(reference image, [(image, H_1_k)]) from one sequence directory."""
    ref_path = _find_image(path, 1)
    if ref_path is None:
        raise FileNotFoundError(f"{path}: no reference image 1.ppm/.pgm/.png")
    reference = read_image(ref_path)
    pairs = []
    k = 2
    while True:
        img_path = _find_image(path, k)
        if img_path is None:
            break
        h_path = os.path.join(path, f"H_1_{k}")
        if not os.path.exists(h_path):
            raise FileNotFoundError(f"missing homography file {h_path}")
        pairs.append((read_image(img_path), _read_h_file(h_path)))
        k += 1
    if not pairs:
        raise FormatError(f"{path}: a sequence needs at least images 1 and 2")
    return reference, pairs


def make_detector(graph, store, *, fp=False, mode="binary", k=None,
                  score_floor=None, nms_radius=None, max_keypoints=None):
    """Callable image -> Detection over a built graph and weight store."""
    kw = {}
    if score_floor is not None:
        kw["score_floor"] = score_floor
    if nms_radius is not None:
        kw["nms_radius"] = nms_radius
    if max_keypoints is not None:
        kw["max_keypoints"] = max_keypoints

    def detect(image):
        heads = (forward_fp if fp else forward)(graph, store, image)
        return decode_heads(heads, mode=mode, k=k, **kw)

    return detect


def _match_indices(det_a, det_b, max_dist=None) -> np.ndarray:
    """(n, 2) mutual nearest-neighbor index pairs for either payload kind."""
    if len(det_a) == 0 or len(det_b) == 0:
        return np.zeros((0, 2), dtype=np.int32)
    if det_a.bits is not None and det_b.bits is not None:
        return match_mutual_nn(det_a.bits, det_b.bits, max_dist=max_dist)[:, :2]
    da, db = det_a.descriptors, det_b.descriptors
    if da is None or db is None:
        raise InvalidInputError("detections carry neither bits nor soft descriptors")
    # soft Hamming expectation: sum a + sum b - 2 a.b
    d = da.sum(axis=1)[:, None] + db.sum(axis=1)[None, :] - 2.0 * (da @ db.T)
    fwd = d.argmin(axis=1)
    bwd = d.argmin(axis=0)
    qi = np.arange(len(da))
    keep = bwd[fwd] == qi
    return np.stack([qi[keep], fwd[keep]], axis=1).astype(np.int32)


def run_sequence_eval(reference, pairs, detector, *, eps_px=DEFAULT_EPS_PX,
                      thresholds=COR_THRESHOLDS, ransac=None,
                      max_keypoints=DEFAULT_KEYPOINT_BUDGET, match_max_dist=None,
                      threads=None) -> MetricReport:
    """All pair metrics of a sequence against its reference image.

    Pairs evaluate independently (optionally threaded, ZIPPY_THREADS
    aware) into index-addressed slots, then aggregate in index order, so
    the report never depends on scheduling.
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidParameterError("sequence evaluation needs at least one pair")
    if len(thresholds) != 3:
        raise InvalidParameterError("thresholds must give the three cor levels")
    ransac = ransac or RansacConfig()
    det_ref = detector(reference).top(max_keypoints)

    n = len(pairs)
    rep = np.full(n, np.nan)
    loc = np.full(n, np.nan)
    mscore = np.full(n, np.nan)
    cors = np.zeros((n, 3), dtype=np.int64)
    kp_counts = np.zeros(n, dtype=np.int64)

    def eval_pair(i):
        image, h = pairs[i]
        det = detector(image).top(max_keypoints)
        kp_counts[i] = len(det)
        matches = _match_indices(det_ref, det, max_dist=match_max_dist)
        rep[i] = repeatability(det_ref, det, h, eps_px)
        loc[i] = localization_error(det_ref, det, h, eps_px)
        mscore[i] = matching_score(det_ref, det, h, matches, eps_px)
        if len(matches) >= 4:
            try:
                est = estimate_homography(
                    det_ref.keypoints[matches[:, 0]],
                    det.keypoints[matches[:, 1]],
                    ransac,
                )
            except EstimationError:
                return
            cors[i] = homography_accuracy(est, h, det_ref.image_size, thresholds)

    def span(s, e):
        for i in range(s, e):
            eval_pair(i)

    run_chunks(span, n, 1, thread_count(threads))

    def agg(vals):
        good = vals[~np.isnan(vals)]
        return (float(good.mean()) if len(good) else math.nan), int(len(good))

    rep_v, rep_n = agg(rep)
    loc_v, _ = agg(loc)
    ms_v, ms_n = agg(mscore)
    cor_rates = cors.mean(axis=0)
    return MetricReport(
        repeatability=rep_v,
        localization_error=loc_v,
        cor1=float(cor_rates[0]),
        cor3=float(cor_rates[1]),
        cor5=float(cor_rates[2]),
        matching_score=ms_v,
        n_pairs=n,
        n_repeat_pairs=rep_n,
        n_match_pairs=ms_n,
        mean_keypoints=float(np.mean(np.concatenate([[len(det_ref)], kp_counts]))),
    )


def _format_h(h: Homography) -> str:
    rows = [" ".join(repr(float(v)) for v in row) for row in h.h]
    return "\n".join(rows) + "\n"


def make_synthetic_dataset(root, n_sequences=3, pairs_per_sequence=5,
                           dims=(320, 240), seed=0, cfg=None):
    """Small HPatches-layout dataset from procedural images and warps.

    Returns the sequence directories. Ground truth is exact by
    construction: each target image is the reference warped by the H
    written next to it, plus photometric noise.
    """
    if n_sequences < 1 or pairs_per_sequence < 1:
        raise InvalidParameterError("need at least one sequence and one pair")
    cfg = cfg or AugmentationConfig(dims=dims, seed=seed)
    w, h = cfg.dims
    out = []
    for s in range(1, n_sequences + 1):
        d = os.path.join(root, f"synth_{s}")
        os.makedirs(d, exist_ok=True)
        rng = np.random.default_rng(seed * 1000 + s)
        base = synthetic_image(h, w, seed=seed * 1000 + s)
        write_pnm(os.path.join(d, "1.ppm"), base)
        for k in range(2, pairs_per_sequence + 2):
            hk = sample_homography(cfg, rng)
            img = apply_photometric(warp_image(base, hk, (w, h)), cfg, rng)
            write_pnm(os.path.join(d, f"{k}.ppm"), img)
            atomic_write_text(os.path.join(d, f"H_1_{k}"), _format_h(hk))
        out.append(d)
    return out
