"""Convolution, pooling, and activation kernels for the mixed-precision path.

Arithmetic contracts, chosen so results are reproducible bit for bit:

* Int8 convolution accumulates exactly. Operands are centered (code minus
  zero point, magnitude <= 255) and multiplied in float32 GEMMs over K
  chunks of at most 256 terms, so every partial sum stays below 2**24 and
  float32 addition is exact. Chunk results add in float64. The accumulator
  is therefore the exact integer sum regardless of BLAS vendor or
  threading, as long as kh*kw*cin <= 2**15 (enforced).
* Binary convolution is XOR + popcount over packed sign bits. For a window
  covering n = kh*kw*cin logical bits the output is n - 2*popcount, the
  exact dot product of the two +/-1 tensors. Spatial padding contributes
  -1 in every channel (clear bits), and the zero padding bits beyond cin
  in each packed word cancel in the XOR, so no masking is needed.
* All float-to-int8 encodings round half away from zero.

Feature maps are (h, w, c); conv weights are (kh, kw, cin, cout) for the
dense kinds and (cout, kh, kw, cin) bit-packed for the binary kind, so a
filter's taps lie in one contiguous word run.
"""

from dataclasses import dataclass

import numpy as np

from ._popcount import xor_popcount_gemm
from .errors import DimensionError, InvalidInputError, InvalidParameterError
from .qtensor import BitTensor, QTensor, binarize_codes, dequantize, quantize, words_per_run

MAX_ACC_TAPS = 1 << 15  # kh*kw*cin cap keeping the int32 accumulator safe
_SPLITK_CHUNK = 256  # 256 * 255^2 < 2**24, float32-exact
_BAND_BYTES = 1 << 25  # im2col working-set cap per GEMM band

POOL_KERNEL = 2
POOL_STRIDE = 2
POOL_MODES = ("max", "average", "subsample", "learned")


@dataclass(frozen=True)
class ConvParams:
    kernel: tuple
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise InvalidParameterError(f"kernel must be positive, got {self.kernel}")
        if self.stride < 1:
            raise InvalidParameterError(f"stride must be positive, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise InvalidParameterError(f"padding must be 'same' or 'valid', got {self.padding!r}")


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 0.0


def _pad_amounts(size: int, k: int, stride: int, padding: str):
    if padding == "valid":
        return 0, 0
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _out_size(size: int, k: int, stride: int, padding: str) -> int:
    lo, hi = _pad_amounts(size, k, stride, padding)
    return (size + lo + hi - k) // stride + 1


def _check_conv_shapes(x_shape, w_shape, p: ConvParams):
    if len(x_shape) != 3:
        raise DimensionError(f"feature map must be (h, w, c), got {x_shape}")
    kh, kw = p.kernel
    if (kh, kw) != tuple(w_shape[:2]):
        raise DimensionError(f"weight kernel {w_shape[:2]} does not match params {p.kernel}")
    if x_shape[2] != w_shape[2]:
        raise DimensionError(f"channel mismatch: input {x_shape[2]}, weights {w_shape[2]}")
    if kh * kw * x_shape[2] > MAX_ACC_TAPS:
        raise InvalidParameterError(
            f"kh*kw*cin = {kh * kw * x_shape[2]} exceeds accumulator capacity {MAX_ACC_TAPS}"
        )
    oh = _out_size(x_shape[0], kh, p.stride, p.padding)
    ow = _out_size(x_shape[1], kw, p.stride, p.padding)
    if oh < 1 or ow < 1:
        raise DimensionError(f"input {x_shape[:2]} too small for kernel {p.kernel}")
    return oh, ow


def _band_rows(oh: int, row_bytes: int) -> int:
    return max(1, min(oh, _BAND_BYTES // max(row_bytes, 1)))


def _patches(x: np.ndarray, kh: int, kw: int, stride: int, r0: int, r1: int):
    """Window patches for output rows [r0, r1) of an already padded map."""
    slab = x[r0 * stride : (r1 - 1) * stride + kh]
    win = np.lib.stride_tricks.sliding_window_view(slab, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]
    ow = win.shape[1]
    # (rows, ow, c, kh, kw) -> (rows*ow, kh*kw*c), tap-major like the weights
    win = win.transpose(0, 1, 3, 4, 2)
    return np.ascontiguousarray(win).reshape((r1 - r0) * ow, -1)


def _gemm_exact_int(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact integer GEMM for centered int16 operands.

    Split along K into chunks of 256: every product is at most 255 * 255,
    so any partial sum inside a chunk stays below 2**24 and float32 holds
    it exactly no matter how BLAS orders the accumulation. Chunk results
    are integers, converted losslessly to float64 and summed there, where
    the MAX_ACC_TAPS cap keeps the total below 2**31.
    """
    af = a.astype(np.float32)
    bf = b.astype(np.float32)
    acc = (af[:, :_SPLITK_CHUNK] @ bf[:_SPLITK_CHUNK]).astype(np.float64)
    for s in range(_SPLITK_CHUNK, a.shape[1], _SPLITK_CHUNK):
        acc += af[:, s : s + _SPLITK_CHUNK] @ bf[s : s + _SPLITK_CHUNK]
    return acc


def conv2d_int8_raw(x: QTensor, w: QTensor, params: ConvParams) -> np.ndarray:
    """Exact int32 accumulator sum((x - zp_x) * (w - zp_w)) per window."""
    oh, ow = _check_conv_shapes(x.shape, w.shape, params)
    kh, kw = params.kernel
    h, wdt, cin = x.shape
    cout = w.shape[3]
    pt, pb = _pad_amounts(h, kh, params.stride, params.padding)
    pl, pr = _pad_amounts(wdt, kw, params.stride, params.padding)
    xc = x.codes.astype(np.int16) - np.int16(x.zero_point)
    xc = np.pad(xc, ((pt, pb), (pl, pr), (0, 0)))  # zero after centering = value 0
    wc = (w.codes.astype(np.int16) - np.int16(w.zero_point)).reshape(kh * kw * cin, cout)
    out = np.empty((oh, ow, cout), dtype=np.int32)
    band = _band_rows(oh, ow * kh * kw * cin * 4)
    for r0 in range(0, oh, band):
        r1 = min(r0 + band, oh)
        acc = _gemm_exact_int(_patches(xc, kh, kw, params.stride, r0, r1), wc)
        out[r0:r1] = acc.reshape(r1 - r0, ow, cout).astype(np.int32)
    return out


def conv2d_int8(
    x: QTensor,
    w: QTensor,
    bias,
    params: ConvParams,
    out_scale: float,
    out_zero_point: int,
) -> QTensor:
    """Quantized conv: requantize(acc * scale_x * scale_w + bias).

    The accumulator is exact, so the only error against the float
    convolution of the dequantized operands is the final rounding step,
    at most out_scale / 2 per element before clamping.
    """
    acc = conv2d_int8_raw(x, w, params)
    pre = acc * np.float64(x.scale * w.scale)
    if bias is not None:
        pre += np.asarray(bias, dtype=np.float64)
    return quantize(pre, out_scale, out_zero_point)


def conv2d_fp(x: np.ndarray, w: np.ndarray, bias, params: ConvParams) -> np.ndarray:
    """Float32 convolution (im2col + GEMM), zero padded."""
    oh, ow = _check_conv_shapes(x.shape, w.shape, params)
    kh, kw = params.kernel
    h, wdt, cin = x.shape
    cout = w.shape[3]
    pt, pb = _pad_amounts(h, kh, params.stride, params.padding)
    pl, pr = _pad_amounts(wdt, kw, params.stride, params.padding)
    xf = np.pad(np.ascontiguousarray(x, dtype=np.float32), ((pt, pb), (pl, pr), (0, 0)))
    wf = np.asarray(w, dtype=np.float32).reshape(kh * kw * cin, cout)
    out = np.empty((oh, ow, cout), dtype=np.float32)
    band = _band_rows(oh, ow * kh * kw * cin * 4)
    for r0 in range(0, oh, band):
        r1 = min(r0 + band, oh)
        res = _patches(xf, kh, kw, params.stride, r0, r1) @ wf
        out[r0:r1] = res.reshape(r1 - r0, ow, cout)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float32)
    return out


def _bin_word_map(x: BitTensor) -> np.ndarray:
    h, w, c = x.shape
    return x.words.reshape(h, w, words_per_run(c))


def conv2d_bin(x: BitTensor, w: BitTensor, params: ConvParams) -> np.ndarray:
    """Exact +/-1 convolution: n - 2*popcount(xor) per window, int32.

    Weights are packed (cout, kh, kw, cin). Padded border positions read
    as -1 in every channel.
    """
    if len(x.shape) != 3:
        raise DimensionError(f"feature map must be (h, w, c), got {x.shape}")
    if len(w.shape) != 4:
        raise DimensionError(f"binary weights must be (cout, kh, kw, cin), got {w.shape}")
    cout, kh, kw, cin = w.shape
    if (kh, kw) != tuple(params.kernel):
        raise DimensionError(f"weight kernel {(kh, kw)} does not match params {params.kernel}")
    if x.shape[2] != cin:
        raise DimensionError(f"channel mismatch: input {x.shape[2]}, weights {cin}")
    h, wdt = x.shape[:2]
    oh = _out_size(h, kh, params.stride, params.padding)
    ow = _out_size(wdt, kw, params.stride, params.padding)
    if oh < 1 or ow < 1:
        raise DimensionError(f"input {x.shape[:2]} too small for kernel {params.kernel}")
    pt, pb = _pad_amounts(h, kh, params.stride, params.padding)
    pl, pr = _pad_amounts(wdt, kw, params.stride, params.padding)
    xm = np.pad(_bin_word_map(x), ((pt, pb), (pl, pr), (0, 0)))
    wpr = xm.shape[2]
    filt = np.ascontiguousarray(w.words.reshape(cout, kh * kw * wpr))
    n = kh * kw * cin
    out = np.empty((oh, ow, cout), dtype=np.int32)
    band = _band_rows(oh, ow * kh * kw * wpr * 8)
    for r0 in range(0, oh, band):
        r1 = min(r0 + band, oh)
        x_words = _patches(xm, kh, kw, params.stride, r0, r1)
        pc = xor_popcount_gemm(x_words, filt)
        out[r0:r1] = (n - 2 * pc).reshape(r1 - r0, ow, cout)
    return out


def conv2d_bin_residual(
    x: QTensor,
    w: BitTensor,
    gain,
    bias,
    params: ConvParams,
    out_scale: float,
    out_zero_point: int,
    res_proj: QTensor | None = None,
) -> QTensor:
    """Binary conv with per-channel affine plus a quantized residual path.

    The input is sign-binarized straight off its codes, convolved against
    binary weights, rescaled per channel (gain, bias fold the training-time
    normalization), and the residual of the unbinarized input is added back
    before requantization: identity when channel counts match, otherwise a
    1x1 int8 projection. Stride must be 1 so the residual aligns.
    """
    if params.stride != 1:
        raise InvalidParameterError("residual binary conv supports stride 1 only")
    cout = w.shape[0]
    counts = conv2d_bin(binarize_codes(x), w, params)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (cout,) or bias.shape != (cout,):
        raise DimensionError(f"gain/bias must be ({cout},), got {gain.shape} and {bias.shape}")
    pre = counts * gain
    pre += bias
    cin = x.shape[2]
    if res_proj is None:
        if cin != cout:
            raise DimensionError(
                f"identity residual needs matching channels, got {cin} -> {cout}"
            )
        res = dequantize(x)  # float32; upcast to f64 is exact on add
    else:
        if res_proj.shape[:2] != (1, 1):
            raise DimensionError(f"residual projection must be 1x1, got {res_proj.shape[:2]}")
        acc = conv2d_int8_raw(x, res_proj, ConvParams((1, 1), 1, "valid"))
        res = acc * np.float64(x.scale * res_proj.scale)
    if pre.shape != res.shape:
        raise DimensionError(f"residual shape {res.shape} does not match conv {pre.shape}")
    pre += res
    return quantize(pre, out_scale, out_zero_point)


def _pool_windows(x: np.ndarray):
    h, w = x.shape[:2]
    if h < POOL_KERNEL or w < POOL_KERNEL:
        raise DimensionError(f"map {x.shape[:2]} too small to pool")
    oh, ow = h // POOL_STRIDE, w // POOL_STRIDE
    v = x[: oh * POOL_STRIDE, : ow * POOL_STRIDE]
    v = v.reshape(oh, POOL_STRIDE, ow, POOL_STRIDE, -1)
    return v, oh, ow


def pool(
    x: QTensor,
    mode: str,
    w: QTensor | None = None,
    bias=None,
    out_scale: float | None = None,
    out_zero_point: int | None = None,
) -> QTensor:
    """2x2 stride-2 pooling on a quantized map. Trailing odd row/col drops.

    max, average, and subsample keep the input scale. learned is an int8
    convolution with the given weights; its output params default to the
    input's when not supplied.
    """
    if mode not in POOL_MODES:
        raise InvalidParameterError(f"unknown pool mode {mode!r}")
    if mode == "learned":
        if w is None:
            raise InvalidParameterError("learned pooling needs weights")
        params = ConvParams((POOL_KERNEL, POOL_KERNEL), POOL_STRIDE, "valid")
        if out_scale is None:
            out_scale, out_zero_point = x.scale, x.zero_point
        xe = x
        if x.shape[0] % 2 or x.shape[1] % 2:
            xe = QTensor(
                np.ascontiguousarray(
                    x.codes[: x.shape[0] // 2 * 2, : x.shape[1] // 2 * 2]
                ),
                x.scale,
                x.zero_point,
            )
        return conv2d_int8(xe, w, bias, params, out_scale, out_zero_point)
    v, oh, ow = _pool_windows(x.codes)
    if mode == "max":
        out = v.max(axis=(1, 3))
    elif mode == "subsample":
        out = v[:, 0, :, 0]
    else:  # average of 4 codes, rounded half away from zero
        s = v.astype(np.int32).sum(axis=(1, 3))
        out = np.sign(s) * ((np.abs(s) * 2 + POOL_KERNEL * POOL_KERNEL) // (2 * POOL_KERNEL * POOL_KERNEL))
        out = np.clip(out, -128, 127).astype(np.int8)
    return QTensor(np.ascontiguousarray(out.astype(np.int8)), x.scale, x.zero_point)


def pool_fp(x: np.ndarray, mode: str, w=None, bias=None) -> np.ndarray:
    """Float counterpart of pool, for the full-precision reference path."""
    if mode not in POOL_MODES:
        raise InvalidParameterError(f"unknown pool mode {mode!r}")
    if mode == "learned":
        if w is None:
            raise InvalidParameterError("learned pooling needs weights")
        params = ConvParams((POOL_KERNEL, POOL_KERNEL), POOL_STRIDE, "valid")
        xe = x[: x.shape[0] // 2 * 2, : x.shape[1] // 2 * 2]
        return conv2d_fp(xe, w, bias, params)
    v, oh, ow = _pool_windows(x)
    if mode == "max":
        return v.max(axis=(1, 3))
    if mode == "subsample":
        return np.ascontiguousarray(v[:, 0, :, 0])
    return v.mean(axis=(1, 3), dtype=np.float64).astype(np.float32)


def hard_swish(v: np.ndarray) -> np.ndarray:
    """x * relu6(x + 3) / 6."""
    v = np.asarray(v)
    return v * np.clip(v + 3.0, 0.0, 6.0) / 6.0


def build_hswish_lut(in_scale, in_zero_point, out_scale, out_zero_point) -> np.ndarray:
    """256-entry int8 table for hard-swish between two quantization grids."""
    codes = np.arange(-128, 128, dtype=np.float64)
    v = (codes - in_zero_point) * in_scale
    return quantize(hard_swish(v), out_scale, out_zero_point).codes


def hard_swish_q(x: QTensor, out_scale: float, out_zero_point: int) -> QTensor:
    """Hard-swish on int8 codes via table lookup; exact per-code mapping."""
    lut = build_hswish_lut(x.scale, x.zero_point, out_scale, out_zero_point)
    out = lut[x.codes.astype(np.int16) + 128]
    return QTensor(out, float(out_scale), int(out_zero_point))


def fold_batchnorm(w: np.ndarray, bias, bn: BatchNormParams):
    """Fold inference-time batch norm into conv weights and bias.

    Returns (w', bias') with w' = w * g, bias' = (bias - mean) * g + beta,
    g = gamma / sqrt(var + eps). Fold before weight quantization.
    """
    g = np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(
        np.asarray(bn.var, dtype=np.float64) + bn.eps
    )
    cout = w.shape[-1]
    if g.shape != (cout,):
        raise DimensionError(f"batchnorm params must be ({cout},), got {g.shape}")
    b = np.zeros(cout) if bias is None else np.asarray(bias, dtype=np.float64)
    w2 = np.asarray(w, dtype=np.float64) * g
    b2 = (b - np.asarray(bn.mean, dtype=np.float64)) * g + np.asarray(bn.beta, dtype=np.float64)
    return w2.astype(np.float32), b2.astype(np.float32)


def batchnorm_affine(bn: BatchNormParams):
    """Batch norm as a per-channel (gain, bias) pair, for binary conv layers."""
    g = np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(
        np.asarray(bn.var, dtype=np.float64) + bn.eps
    )
    b = np.asarray(bn.beta, dtype=np.float64) - np.asarray(bn.mean, dtype=np.float64) * g
    return g.astype(np.float32), b.astype(np.float32)
