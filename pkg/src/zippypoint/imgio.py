"""Image file reading and writing.

Binary PPM (P6) and PGM (P5) are handled natively since the evaluation
datasets ship in that format. PNG goes through pillow when it is
installed; the import is deferred so the core package works without it.
"""

import os

import numpy as np

from ._io import atomic_write_bytes
from .errors import ConfigurationError, FormatError, InvalidInputError, TruncatedFileError


def _read_pnm_tokens(raw, count):
    """First `count` whitespace-separated header tokens, skipping # comments.

    Returns (tokens, offset of the byte right after the final token's
    single whitespace terminator).
    """
    tokens = []
    i = 0
    n = len(raw)
    while len(tokens) < count:
        while i < n and raw[i : i + 1].isspace():
            i += 1
        if i < n and raw[i : i + 1] == b"#":
            while i < n and raw[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not raw[i : i + 1].isspace() and raw[i : i + 1] != b"#":
            i += 1
        if i == start:
            raise TruncatedFileError("unexpected end of header")
        tokens.append(raw[start:i])
        if len(tokens) == count:
            # exactly one whitespace byte separates the header from the pixels
            if i >= n or not raw[i : i + 1].isspace():
                raise FormatError("missing delimiter after maxval")
            i += 1
    return tokens, i


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    try:
        tokens, offset = _read_pnm_tokens(raw, 4)
    except TruncatedFileError as e:
        raise TruncatedFileError(f"{path}: {e}") from None
    width, height, maxval = (int(t) for t in tokens[1:])
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval > 255:
        raise FormatError(f"{path}: {maxval} exceeds 8-bit range")
    if maxval <= 0:
        raise FormatError(f"{path}: bad maxval {maxval}")
    channels = 3 if tokens[0] == b"P6" else 1
    need = width * height * channels
    data = raw[offset : offset + need]
    if len(data) < need:
        raise TruncatedFileError(f"{path}: expected {need} pixel bytes, found {len(data)}")
    img = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
    return img[:, :, 0] if channels == 1 else img


def write_pnm(path, image: np.ndarray):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise InvalidInputError("PNM output takes uint8 images")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise InvalidInputError(f"cannot encode shape {img.shape} as PNM")
    h, w = img.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    atomic_write_bytes(path, header + np.ascontiguousarray(img).tobytes())


def _pillow():
    try:
        from PIL import Image
    except ImportError:
        raise ConfigurationError(
            "PNG support needs the pillow package (pip install zippypoint[png])"
        ) from None
    return Image


def read_image(path) -> np.ndarray:
    """uint8 image, (h, w) grayscale or (h, w, 3) RGB, by content sniffing."""
    with open(path, "rb") as f:
        head = f.read(8)
    if head[:2] in (b"P5", b"P6"):
        return read_pnm(path)
    if head.startswith(b"\x89PNG"):
        img = _pillow().open(path)
        img = img.convert("L") if img.mode in ("L", "1", "I;16") else img.convert("RGB")
        return np.asarray(img, dtype=np.uint8)
    raise FormatError(f"{path}: unrecognized image format")


def write_image(path, image: np.ndarray):
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".ppm", ".pgm", ".pnm"):
        write_pnm(path, image)
    elif ext == ".png":
        img = np.asarray(image)
        if img.dtype != np.uint8:
            raise InvalidInputError("PNG output takes uint8 images")
        _pillow().fromarray(img).save(str(path))
    else:
        raise InvalidInputError(f"unsupported image extension {ext!r}")
