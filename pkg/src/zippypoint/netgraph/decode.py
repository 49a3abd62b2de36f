"""Head-map decoding: cell grids to keypoints, descriptors, and files.

Each backbone cell is 8x8 pixels. The score head gives one logit per
cell, the location head a 2-vector mapped through 0.5*tanh to an offset
in (-0.5, 0.5) cell units around the cell center, so a keypoint lands at

    x = (col + 0.5 + ox) * 8,   y = (row + 0.5 + oy) * 8.

Candidates above the score floor go through greedy radius suppression in
score order (index breaks ties), then the top survivors keep their cell's
descriptor logits: thresholded to the k largest bits for the binary
route, or passed through the mass-constrained projection for the soft
route. Thresholding logits directly is sound because the projection is
monotone per element.

Detection wire format (little-endian):

    magic b"ZPDT", version u16, width u32, height u32, m u32, k u32,
    kind u8 (0 soft, 1 binary), count u32, then per keypoint
    x f32, y f32, score f32, payload (m f32 values | m/8 bytes).
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

from .._io import atomic_write_bytes
from ..binnorm import project_batch, sigmoid, top_k_threshold
from ..errors import (
    BadMagicError,
    FormatError,
    InvalidInputError,
    InvalidParameterError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from ..matcher import DescriptorSet
from ..qtensor import QTensor, dequantize
from .config import CELL

DET_MAGIC = b"ZPDT"
DET_VERSION = 1

DEFAULT_NMS_RADIUS = 4.0
DEFAULT_SCORE_FLOOR = 0.0
DEFAULT_MAX_KEYPOINTS = 1000


@dataclass(frozen=True)
class Detection:
    """Decoded keypoints, scores sorted descending, and descriptors."""

    keypoints: np.ndarray  # (n, 2) float32 x, y
    scores: np.ndarray  # (n,) float32
    m: int
    k: int
    mode: str  # soft | binary
    image_size: tuple  # (w, h)
    descriptors: np.ndarray | None = None  # soft: (n, m) float32 in (0, 1)
    bits: DescriptorSet | None = None  # binary: packed rows

    def __len__(self):
        return self.keypoints.shape[0]

    def top(self, n: int) -> "Detection":
        """The n strongest keypoints (rows are already score sorted)."""
        if n < 0:
            raise InvalidParameterError("keypoint budget must be nonnegative")
        if n >= len(self):
            return self
        bits = None
        if self.bits is not None:
            bits = DescriptorSet(self.bits.words[:n].copy(), self.m)
        soft = self.descriptors[:n].copy() if self.descriptors is not None else None
        return Detection(
            self.keypoints[:n].copy(), self.scores[:n].copy(),
            self.m, self.k, self.mode, self.image_size,
            descriptors=soft, bits=bits,
        )


def _as_float_map(v) -> np.ndarray:
    return dequantize(v).astype(np.float64) if isinstance(v, QTensor) else np.asarray(v, dtype=np.float64)


def greedy_nms(points: np.ndarray, scores: np.ndarray, radius: float) -> np.ndarray:
    """Indices kept by greedy radius suppression, in keep order."""
    n = len(points)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -scores))
    alive = np.ones(n, dtype=bool)
    r2 = radius * radius
    kept = []
    px, py = points[:, 0], points[:, 1]
    for idx in order:
        if not alive[idx]:
            continue
        kept.append(idx)
        d2 = (px - px[idx]) ** 2 + (py - py[idx]) ** 2
        alive &= d2 > r2
    return np.array(kept, dtype=np.int64)


def decode(
    heads: dict,
    mode: str = "binary",
    k: int | None = None,
    score_floor: float = DEFAULT_SCORE_FLOOR,
    nms_radius: float = DEFAULT_NMS_RADIUS,
    max_keypoints: int = DEFAULT_MAX_KEYPOINTS,
) -> Detection:
    if mode not in ("soft", "binary"):
        raise InvalidParameterError(f"mode must be 'soft' or 'binary', got {mode!r}")
    if max_keypoints < 1:
        raise InvalidParameterError(f"max_keypoints must be >= 1, got {max_keypoints}")
    if nms_radius < 0:
        raise InvalidParameterError(f"nms_radius must be >= 0, got {nms_radius}")
    score_map = _as_float_map(heads["score"])
    loc_map = _as_float_map(heads["location"])
    desc_map = _as_float_map(heads["descriptor"])
    if score_map.ndim != 3 or score_map.shape[2] != 1:
        raise InvalidInputError(f"score map must be (hc, wc, 1), got {score_map.shape}")
    hc, wc = score_map.shape[:2]
    if loc_map.shape != (hc, wc, 2):
        raise InvalidInputError(f"location map must be {(hc, wc, 2)}, got {loc_map.shape}")
    if desc_map.ndim != 3 or desc_map.shape[:2] != (hc, wc):
        raise InvalidInputError(f"descriptor map must be (hc, wc, m), got {desc_map.shape}")
    m = desc_map.shape[2]
    if k is None:
        k = m // 2
    if not (1 <= k <= m):
        raise InvalidParameterError(f"k must be in [1, {m}], got {k}")
    width, height = heads.get("image_size", (wc * CELL, hc * CELL))

    scores = sigmoid(score_map[:, :, 0])
    offsets = 0.5 * np.tanh(loc_map)
    cols, rows = np.meshgrid(np.arange(wc), np.arange(hc))
    xs = (cols + 0.5 + offsets[:, :, 0]) * CELL
    ys = (rows + 0.5 + offsets[:, :, 1]) * CELL

    flat_scores = scores.ravel()
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    keep = (flat_scores > score_floor) & (pts[:, 0] < width) & (pts[:, 1] < height)
    cand = np.flatnonzero(keep)
    kept = greedy_nms(pts[cand], flat_scores[cand], nms_radius)[:max_keypoints]
    chosen = cand[kept]

    cell_rows, cell_cols = np.unravel_index(chosen, (hc, wc))
    logits = desc_map[cell_rows, cell_cols]
    kp = pts[chosen].astype(np.float32)
    sc = flat_scores[chosen].astype(np.float32)
    if mode == "binary":
        masks = np.stack([top_k_threshold(row, k) for row in logits]) if len(logits) else np.zeros((0, m), dtype=np.uint8)
        bits = DescriptorSet.from_bits(masks.reshape(-1, m))
        return Detection(kp, sc, m, k, mode, (width, height), bits=bits)
    if len(logits):
        soft, _ = project_batch(logits, k)
    else:
        soft = np.zeros((0, m))
    return Detection(kp, sc, m, k, mode, (width, height), descriptors=soft.astype(np.float32))


def save_detections(det: Detection, path: str):
    blob = io.BytesIO()
    blob.write(DET_MAGIC)
    kind = 1 if det.mode == "binary" else 0
    blob.write(
        struct.pack(
            "<HIIIIBI",
            DET_VERSION,
            det.image_size[0],
            det.image_size[1],
            det.m,
            det.k,
            kind,
            len(det),
        )
    )
    if det.mode == "binary":
        payloads = det.bits.to_bytes()
    else:
        payloads = det.descriptors
    for i in range(len(det)):
        blob.write(struct.pack("<fff", det.keypoints[i, 0], det.keypoints[i, 1], det.scores[i]))
        if det.mode == "binary":
            blob.write(payloads[i].tobytes())
        else:
            blob.write(payloads[i].astype("<f4").tobytes())
    atomic_write_bytes(path, blob.getvalue())


def load_detections(path: str) -> Detection:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != DET_MAGIC:
        raise BadMagicError(f"{path}: not a detection file")
    head = struct.calcsize("<HIIIIBI")
    if len(data) < 4 + head:
        raise TruncatedFileError(f"{path}: header incomplete")
    version, width, height, m, k, kind, count = struct.unpack("<HIIIIBI", data[4 : 4 + head])
    if version != DET_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, reader supports {DET_VERSION}")
    if kind not in (0, 1):
        raise FormatError(f"{path}: unknown descriptor kind {kind}")
    if kind == 1 and m % 8 != 0:
        raise FormatError(f"{path}: binary descriptors need m divisible by 8, got {m}")
    payload = m * 4 if kind == 0 else m // 8
    rec = 12 + payload
    body = data[4 + head :]
    if len(body) != rec * count:
        raise TruncatedFileError(
            f"{path}: expected {rec * count} record bytes for {count} keypoints, got {len(body)}"
        )
    kp = np.empty((count, 2), dtype=np.float32)
    sc = np.empty(count, dtype=np.float32)
    soft = np.empty((count, m), dtype=np.float32) if kind == 0 else None
    raw = np.empty((count, payload), dtype=np.uint8) if kind == 1 else None
    for i in range(count):
        off = i * rec
        x, y, s = struct.unpack("<fff", body[off : off + 12])
        kp[i] = (x, y)
        sc[i] = s
        if kind == 0:
            soft[i] = np.frombuffer(body[off + 12 : off + rec], dtype="<f4")
        else:
            raw[i] = np.frombuffer(body[off + 12 : off + rec], dtype=np.uint8)
    mode = "binary" if kind else "soft"
    bits = DescriptorSet.from_bytes(raw, m) if kind else None
    return Detection(kp, sc, m, k, mode, (width, height), descriptors=soft, bits=bits)
