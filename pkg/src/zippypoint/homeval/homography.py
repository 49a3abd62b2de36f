"""Planar homographies: sampling, point warps, image warps, photometric noise.

Coordinates are (x, y) with x along image columns, pixel centers on the
integer grid. A transform maps reference-frame points into target-frame
points; images are warped by inverse-mapping the target grid.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from ..errors import EstimationError, InvalidInputError, InvalidParameterError

MIN_DET = 1e-12
MIN_W = 1e-12
MAX_SAMPLE_TRIES = 32

_LUMA = np.array([0.299, 0.587, 0.114])
# RGB <-> YIQ, the NTSC pair; hue shifts rotate the IQ plane
_RGB_TO_YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]]
)
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, stored with h[2][2] == 1."""

    h: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.h, dtype=np.float64)
        if m.shape != (3, 3):
            raise InvalidInputError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("homography entries must be finite")
        if abs(m[2, 2]) <= MIN_DET:
            raise InvalidInputError("h[2][2] is ~0, cannot normalize")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= MIN_DET:
            raise InvalidInputError("homography is singular")
        m.flags.writeable = False
        object.__setattr__(self, "h", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx, ty) -> "Homography":
        m = np.eye(3)
        m[0, 2], m[1, 2] = tx, ty
        return cls(m)

    @classmethod
    def rotation(cls, angle, center=(0.0, 0.0)) -> "Homography":
        c, s = math.cos(angle), math.sin(angle)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls.translation(*center) @ cls(r) @ cls.translation(-center[0], -center[1])

    @classmethod
    def scaling(cls, sx, sy=None, center=(0.0, 0.0)) -> "Homography":
        sy = sx if sy is None else sy
        m = np.diag([float(sx), float(sy), 1.0])
        return cls.translation(*center) @ cls(m) @ cls.translation(-center[0], -center[1])

    @classmethod
    def perspective(cls, px, py, center=(0.0, 0.0)) -> "Homography":
        m = np.eye(3)
        m[2, 0], m[2, 1] = px, py
        return cls.translation(*center) @ cls(m) @ cls.translation(-center[0], -center[1])

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.h @ other.h)

    def warp(self, pts):
        return warp_points(self, pts)

    def as_array(self) -> np.ndarray:
        return self.h.copy()


def warp_points(h: Homography, pts):
    """Projective transform of (n, 2) points.

    Returns (warped (n, 2) float64, valid (n,) bool). A point whose
    homogeneous w lands at or below MIN_W is flagged invalid and its
    output row is left as 0.
    """
    p = np.asarray(pts, dtype=np.float64)
    squeeze = p.ndim == 1
    p = np.atleast_2d(p)
    if p.ndim != 2 or p.shape[1] != 2:
        raise InvalidInputError(f"points must be (n, 2), got {p.shape}")
    m = h.h
    w = p @ m[2, :2] + m[2, 2]
    valid = w > MIN_W
    num = p @ m[:2, :2].T + m[:2, 2]
    out = np.zeros_like(num)
    np.divide(num, w[:, None], out=out, where=valid[:, None])
    if squeeze:
        return out[0], valid[0]
    return out, valid


def _check_range(name, r, lo_min=None, hi_max=None):
    if len(r) != 2 or not np.all(np.isfinite(r)):
        raise InvalidParameterError(f"{name} must be a finite (lo, hi) pair, got {r!r}")
    lo, hi = float(r[0]), float(r[1])
    if lo > hi:
        raise InvalidParameterError(f"{name} range is empty: {r!r}")
    if lo_min is not None and lo < lo_min:
        raise InvalidParameterError(f"{name} must stay >= {lo_min}, got {r!r}")
    if hi_max is not None and hi > hi_max:
        raise InvalidParameterError(f"{name} must stay <= {hi_max}, got {r!r}")
    return (lo, hi)


@dataclass(frozen=True)
class AugmentationConfig:
    """Ranges for spatial warps and photometric perturbations.

    Spatial parameters refer to a frame of `dims` = (width, height);
    rotation, scale, and perspective pivot about its center. Each range
    is sampled uniformly, so a zero-width range pins the parameter.
    """

    dims: tuple = (320, 240)
    crop: tuple = (0.8, 1.0)  # retained sub-rectangle fraction
    translation: tuple = (-16.0, 16.0)  # px, drawn per axis
    scale: tuple = (0.85, 1.15)
    rotation: tuple = (-0.26, 0.26)  # radians
    perspective: tuple = (0.0, 6e-4)  # magnitude, sign drawn per axis
    noise_sigma: tuple = (0.0, 4.0)  # per-pixel Gaussian, 8-bit units
    blur_sigma: tuple = (0.0, 1.2)
    brightness: tuple = (-24.0, 24.0)  # additive, 8-bit units
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.7, 1.3)
    hue: tuple = (-0.15, 0.15)  # IQ-plane rotation, radians
    channel_shuffle: bool = False
    grayscale: bool = False
    seed: int = 0

    def __post_init__(self):
        w, hgt = self.dims
        if int(w) <= 0 or int(hgt) <= 0:
            raise InvalidParameterError(f"dims must be positive, got {self.dims!r}")
        object.__setattr__(self, "dims", (int(w), int(hgt)))
        object.__setattr__(self, "crop", _check_range("crop", self.crop, 1e-3, 1.0))
        object.__setattr__(self, "translation", _check_range("translation", self.translation))
        object.__setattr__(self, "scale", _check_range("scale", self.scale, 1e-3))
        object.__setattr__(self, "rotation", _check_range("rotation", self.rotation))
        object.__setattr__(self, "perspective", _check_range("perspective", self.perspective, 0.0))
        object.__setattr__(self, "noise_sigma", _check_range("noise_sigma", self.noise_sigma, 0.0))
        object.__setattr__(self, "blur_sigma", _check_range("blur_sigma", self.blur_sigma, 0.0))
        object.__setattr__(self, "brightness", _check_range("brightness", self.brightness))
        object.__setattr__(self, "contrast", _check_range("contrast", self.contrast, 0.0))
        object.__setattr__(self, "saturation", _check_range("saturation", self.saturation, 0.0))
        object.__setattr__(self, "hue", _check_range("hue", self.hue))

    @classmethod
    def neutral(cls, dims=(320, 240), seed=0) -> "AugmentationConfig":
        """Every parameter pinned at its do-nothing value."""
        return cls(
            dims=dims,
            crop=(1.0, 1.0),
            translation=(0.0, 0.0),
            scale=(1.0, 1.0),
            rotation=(0.0, 0.0),
            perspective=(0.0, 0.0),
            noise_sigma=(0.0, 0.0),
            blur_sigma=(0.0, 0.0),
            brightness=(0.0, 0.0),
            contrast=(1.0, 1.0),
            saturation=(1.0, 1.0),
            hue=(0.0, 0.0),
            seed=seed,
        )

    def with_(self, **changes) -> "AugmentationConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return AugmentationConfig(**kw)


def _sample_once(cfg: AugmentationConfig, rng) -> Homography:
    w, hgt = cfg.dims
    center = ((w - 1) / 2.0, (hgt - 1) / 2.0)

    c = rng.uniform(*cfg.crop)
    ax = rng.uniform(0.0, (1.0 - c) * w)
    ay = rng.uniform(0.0, (1.0 - c) * hgt)
    crop = Homography.scaling(1.0 / c) @ Homography.translation(-ax, -ay)

    px = rng.uniform(*cfg.perspective) * rng.choice((-1.0, 1.0))
    py = rng.uniform(*cfg.perspective) * rng.choice((-1.0, 1.0))
    persp = Homography.perspective(px, py, center)

    scale = Homography.scaling(rng.uniform(*cfg.scale), center=center)
    rot = Homography.rotation(rng.uniform(*cfg.rotation), center=center)
    trans = Homography.translation(rng.uniform(*cfg.translation), rng.uniform(*cfg.translation))

    return trans @ rot @ scale @ persp @ crop


def sample_homography(cfg: AugmentationConfig, rng=None) -> Homography:
    """Random warp as translate * rotate * scale * perspective * crop."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    for _ in range(MAX_SAMPLE_TRIES):
        try:
            h = _sample_once(cfg, rng)
        except InvalidInputError:
            continue  # degenerate composition, draw again
        if abs(np.linalg.det(h.h)) > MIN_DET:
            return h
    raise EstimationError(f"no invertible warp in {MAX_SAMPLE_TRIES} draws; check ranges")


def warp_image(image: np.ndarray, h: Homography, dims=None) -> np.ndarray:
    """Bilinear warp of a uint8 image onto the target grid.

    dims is the (width, height) of the output; defaults to the input
    size. Target pixels that map outside the source are black.
    """
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise InvalidInputError("warp_image takes uint8 images")
    gray = img.ndim == 2
    if gray:
        img = img[:, :, None]
    sh, sw = img.shape[:2]
    ow, oh = (sw, sh) if dims is None else (int(dims[0]), int(dims[1]))

    xs, ys = np.meshgrid(np.arange(ow, dtype=np.float64), np.arange(oh, dtype=np.float64))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src, valid = warp_points(h.inverse(), grid)
    sx, sy = src[:, 0], src[:, 1]
    inside = valid & (sx >= 0) & (sx <= sw - 1) & (sy >= 0) & (sy <= sh - 1)

    x0 = np.clip(np.floor(sx).astype(np.int64), 0, sw - 2) if sw > 1 else np.zeros(len(sx), np.int64)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, sh - 2) if sh > 1 else np.zeros(len(sy), np.int64)
    fx = np.clip(sx - x0, 0.0, 1.0)[:, None]
    fy = np.clip(sy - y0, 0.0, 1.0)[:, None]
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)

    f = img.astype(np.float64)
    top = f[y0, x0] * (1 - fx) + f[y0, x1] * fx
    bot = f[y1, x0] * (1 - fx) + f[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out[~inside] = 0.0
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8).reshape(oh, ow, img.shape[2])
    return out[:, :, 0] if gray else out


def _blur1d(f: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * f.ndim
    pad[axis] = (r, r)
    padded = np.pad(f, pad, mode="reflect")
    win = np.moveaxis(np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=axis), -1, 0)
    return np.tensordot(kernel, win, axes=(0, 0))


def _gaussian_kernel(sigma: float) -> np.ndarray:
    r = max(int(math.ceil(3.0 * sigma)), 1)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def apply_photometric(image: np.ndarray, cfg: AugmentationConfig, rng=None) -> np.ndarray:
    """Photometric perturbations drawn from cfg; geometry untouched."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise InvalidInputError("apply_photometric takes uint8 images")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    gray_in = img.ndim == 2
    f = img.astype(np.float64)
    if gray_in:
        f = f[:, :, None]

    sigma = rng.uniform(*cfg.noise_sigma)
    if sigma > 0:
        f = f + rng.normal(0.0, sigma, size=f.shape)

    bsig = rng.uniform(*cfg.blur_sigma)
    if bsig > 0.3:  # below this the kernel is effectively a delta
        k = _gaussian_kernel(bsig)
        f = _blur1d(_blur1d(f, k, axis=0), k, axis=1)

    f = f + rng.uniform(*cfg.brightness)

    contrast = rng.uniform(*cfg.contrast)
    f = (f - f.mean()) * contrast + f.mean()

    color = f.shape[2] == 3
    if color:
        sat = rng.uniform(*cfg.saturation)
        luma = f @ _LUMA
        f = luma[:, :, None] + (f - luma[:, :, None]) * sat

        theta = rng.uniform(*cfg.hue)
        if theta != 0.0:
            cs, sn = math.cos(theta), math.sin(theta)
            rot = np.array([[1.0, 0.0, 0.0], [0.0, cs, -sn], [0.0, sn, cs]])
            f = f @ (_YIQ_TO_RGB @ rot @ _RGB_TO_YIQ).T

        if cfg.channel_shuffle:
            f = f[:, :, rng.permutation(3)]

        if cfg.grayscale:
            f = np.repeat((f @ _LUMA)[:, :, None], 3, axis=2)

    out = np.clip(np.rint(f), 0, 255).astype(np.uint8)
    return out[:, :, 0] if gray_in else out
