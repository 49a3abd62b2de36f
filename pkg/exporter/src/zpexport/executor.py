"""Reference simulation of the engine's mixed-precision forward pass.

Written from the engine's documented arithmetic, not from its code: a
tap-loop convolution in float64 instead of im2col GEMM bands, explicit
(unfolded) batch norm on the float layers instead of folded kernels,
and local folding for the quantized ones. Where the engine's numeric
contract pins an operation to a dtype the simulation pins it the same
way (dequantization in float32, grids as float32 on the wire, codes
rounded half away from zero); everywhere else it runs in float64. The
point of existing is to disagree with the engine when either side gets
a layer wrong, so it deliberately shares no kernel code with it.

Integer-valued layers stay exact here for the same reason they are
exact in the engine: every centered product fits comfortably below
2**53, so float64 accumulation in any order is lossless.
"""

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .manifest import ExportManifest, validate
from .quant import fold_bn, quant_codes, weight_scale


@dataclass
class LayerOut:
    kind: str  # "q" for int8 codes, "f" for float32 values
    data: np.ndarray
    scale: float | None = None
    zero_point: int | None = None


@dataclass
class _Q:
    codes: np.ndarray
    scale: float
    zero_point: int


def _pad_lohi(size, k, stride, padding):
    if padding == "valid":
        return 0, 0
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _conv(x, w, stride=1, padding="same", pad_value=0.0):
    """Dense conv, one shifted matmul per kernel tap. x (h,w,ci), w (kh,kw,ci,co)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    kh, kw = w.shape[:2]
    pt, pb = _pad_lohi(x.shape[0], kh, stride, padding)
    pl, pr = _pad_lohi(x.shape[1], kw, stride, padding)
    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)), constant_values=pad_value)
    oh = (xp.shape[0] - kh) // stride + 1
    ow = (xp.shape[1] - kw) // stride + 1
    out = np.zeros((oh, ow, w.shape[3]))
    for ky in range(kh):
        for kx in range(kw):
            sl = xp[ky : ky + (oh - 1) * stride + 1 : stride,
                    kx : kx + (ow - 1) * stride + 1 : stride]
            out += sl @ w[ky, kx]
    return out


def _deq(x: _Q) -> np.ndarray:
    # float32 on purpose: dequantization is a float32 op in the engine contract
    return (x.codes.astype(np.float32) - np.float32(x.zero_point)) * np.float32(x.scale)


def _hswish(v):
    return v * np.clip(v + 3.0, 0.0, 6.0) / 6.0


def _even(a):
    return a[: a.shape[0] // 2 * 2, : a.shape[1] // 2 * 2]


def _pool_plain(x, mode):
    if isinstance(x, _Q):
        v = _even(x.codes)
        v = v.reshape(v.shape[0] // 2, 2, v.shape[1] // 2, 2, -1)
        if mode == "max":
            out = v.max(axis=(1, 3))
        elif mode == "subsample":
            out = v[:, 0, :, 0]
        else:  # integer mean of the four codes, ties away from zero
            s = v.astype(np.int32).sum(axis=(1, 3))
            out = np.sign(s) * ((np.abs(s) * 2 + 4) // 8)
            out = np.clip(out, -128, 127)
        return _Q(out.astype(np.int8), x.scale, x.zero_point)
    v = _even(np.asarray(x, dtype=np.float64))
    v = v.reshape(v.shape[0] // 2, 2, v.shape[1] // 2, 2, -1)
    if mode == "max":
        return v.max(axis=(1, 3))
    if mode == "subsample":
        return np.ascontiguousarray(v[:, 0, :, 0])
    return v.mean(axis=(1, 3))


class _Sim:
    def __init__(self, ck: Checkpoint, manifest: ExportManifest):
        self.ck = ck
        self.manifest = manifest
        self.graph, plans = validate(manifest)
        self.plans = {p.name: p for p in plans}

    def _grid(self, name, field):
        return self.manifest.grids[name][field]

    def _folded(self, name):
        m = self.manifest.layers[name]
        w, bias = self.ck.conv(m.conv)
        if m.bn is None:
            b = np.zeros(w.shape[-1], dtype=np.float32) if bias is None else bias
            return w, b
        return fold_bn(w, bias, *self.ck.bn(m.bn))

    def _as_q(self, x, name) -> _Q:
        if isinstance(x, _Q):
            return x
        s, zp = self._grid(name, "in")
        return _Q(quant_codes(np.asarray(x, dtype=np.float64), s, zp), s, zp)

    def _requant_conv(self, xq: _Q, wf, stride, padding):
        """Centered int8 conv of xq against the quantized form of wf."""
        ws = weight_scale(wf)
        wc = quant_codes(wf, ws, 0)
        acc = _conv(xq.codes.astype(np.float64) - xq.zero_point,
                    wc.astype(np.float64), stride, padding, 0.0)
        return acc * (float(xq.scale) * float(ws))

    def _run(self, l, x):
        name = l.name
        p = self.plans[name]
        if l.kind == "pool":
            if l.pool_mode != "learned":
                return _pool_plain(x, l.pool_mode)
            xq = self._as_q(x, name)
            w, b = self._folded(name)
            pre = self._requant_conv(_Q(_even(xq.codes), xq.scale, xq.zero_point),
                                     w, 2, "valid")
            pre += b.astype(np.float64)
            s, zp = self._grid(name, "pre")
            return _Q(quant_codes(pre, s, zp), s, zp)

        if l.precision == "fp":
            xf = _deq(x).astype(np.float64) if isinstance(x, _Q) else x
            m = self.manifest.layers[name]
            w, bias = self.ck.conv(m.conv)
            out = _conv(xf, w, l.params.stride, l.params.padding)
            if bias is not None:
                out += bias.astype(np.float64)
            if m.bn is not None:
                gamma, beta, mean, var = self.ck.bn(m.bn)
                g = gamma.astype(np.float64) / np.sqrt(var.astype(np.float64))
                out = (out - mean.astype(np.float64)) * g + beta.astype(np.float64)
            return _hswish(out) if l.activation else out

        xq = self._as_q(x, name)
        w, b = self._folded(name)
        if l.precision == "int8":
            pre = self._requant_conv(xq, w, l.params.stride, l.params.padding)
            pre += b.astype(np.float64)
        else:  # bin / bin_r
            sx = np.where(xq.codes >= xq.zero_point, 1.0, -1.0)
            sw = np.where(w >= 0, 1.0, -1.0)
            counts = _conv(sx, sw, l.params.stride, l.params.padding, pad_value=-1.0)
            gain = np.abs(w).mean(axis=(0, 1, 2)).astype(np.float32)
            pre = counts * gain.astype(np.float64)
            pre += b.astype(np.float64)
            if l.precision == "bin_r":
                if p.needs_proj:
                    pw, _ = self.ck.conv(self.manifest.layers[name].proj)
                    res = self._requant_conv(xq, pw, 1, "valid")
                else:
                    res = _deq(xq)
                pre += res
        s, zp = self._grid(name, "pre")
        out = _Q(quant_codes(pre, s, zp), s, zp)
        if not l.activation:
            return out
        sa, za = self._grid(name, "act")
        va = (out.codes.astype(np.float64) - out.zero_point) * out.scale
        return _Q(quant_codes(_hswish(va), sa, za), sa, za)

    def run(self, image) -> dict:
        x = _entry(image, self.graph)
        trace = {}
        for l in self.graph.encoder:
            x = self._run(l, x)
            trace[l.name] = x
        for layers in (self.graph.score, self.graph.location, self.graph.descriptor):
            y = x
            for l in layers:
                y = self._run(l, y)
                trace[l.name] = y
        return {name: _layer_out(v) for name, v in trace.items()}


def _entry(image, graph) -> _Q:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError(f"expected a uint8 image, got {img.dtype}")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    cell = 2 ** sum(1 for l in graph.encoder if l.kind == "pool")
    h, w = img.shape[:2]
    ph, pw = (-h) % cell, (-w) % cell
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    codes = (img.astype(np.int16) - 128).astype(np.int8)
    return _Q(codes, 1.0 / 255.0, -128)


def _layer_out(v) -> LayerOut:
    if isinstance(v, _Q):
        return LayerOut("q", v.codes, v.scale, v.zero_point)
    return LayerOut("f", np.asarray(v, dtype=np.float32))


def simulate(ck: Checkpoint, manifest: ExportManifest, image) -> dict:
    """Per-layer outputs of the simulated forward, keyed by layer name."""
    return _Sim(ck, manifest).run(image)
