"""Deterministic weight and image generation plus range calibration.

Shipping weights come from a training pipeline through the export tooling;
everything here exists so the engine can be exercised, benchmarked, and
cross-checked hermetically. ``random_master`` draws float32 master weights
for a graph, ``build_stores`` derives the matching fp32 store and the
calibrated quantized store, fitting every activation range on one pass
over a calibration image. All of it is a pure function of (graph, seed,
image), so two runs agree byte for byte.
"""

import numpy as np

from ..kernels import (
    ConvParams,
    conv2d_bin,
    conv2d_fp,
    conv2d_int8_raw,
    hard_swish,
    hard_swish_q,
    pool,
    pool_fp,
)
from ..qtensor import QTensor, binarize, binarize_codes, dequantize, quantize
from .graph import Graph, _image_qtensor, prepare_image
from .weights import (
    WeightStore,
    bin_record,
    fp32_record,
    int8_record,
    marker_record,
)


def _resize_bilinear(a: np.ndarray, h: int, w: int) -> np.ndarray:
    ys = np.linspace(0, a.shape[0] - 1, h)
    xs = np.linspace(0, a.shape[1] - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, a.shape[0] - 1)
    x1 = np.minimum(x0 + 1, a.shape[1] - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def synthetic_image(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Smooth random uint8 test image with enough texture to detect on."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0, 255, size=(max(height // 8, 2), max(width // 8, 2), 3))
    img = _resize_bilinear(coarse, height, width)
    img += rng.normal(scale=12.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def random_master(graph: Graph, seed: int = 0) -> dict:
    """Float32 master weights per layer: w, b, and p where a residual
    projection could be needed."""
    rng = np.random.default_rng(seed)
    master = {}
    for l in graph.all_layers():
        if l.kind == "pool":
            if l.pool_mode != "learned":
                continue
            c = l.in_channels
            w = np.zeros((2, 2, c, c), dtype=np.float64)
            for ch in range(c):
                w[:, :, ch, ch] = 0.25
            w += rng.normal(scale=0.04, size=w.shape)
            master[l.name] = {
                "w": w.astype(np.float32),
                "b": np.zeros(c, dtype=np.float32),
            }
            continue
        kh, kw = l.params.kernel
        fan_in = kh * kw * l.in_channels
        entry = {
            "w": rng.normal(scale=np.sqrt(2.0 / fan_in), size=(kh, kw, l.in_channels, l.out_channels)).astype(np.float32),
            "b": rng.normal(scale=0.05, size=l.out_channels).astype(np.float32),
        }
        if l.in_channels != l.out_channels:
            entry["p"] = rng.normal(
                scale=np.sqrt(1.0 / l.in_channels), size=(1, 1, l.in_channels, l.out_channels)
            ).astype(np.float32)
        master[l.name] = entry
    return master


def _fit_affine(values: np.ndarray):
    """Affine (scale, zero_point) covering the observed range and zero."""
    lo = min(float(values.min()), 0.0)
    hi = max(float(values.max()), 0.0)
    span = hi - lo
    if span < 1e-8:
        span = 1e-8
    # scales live as f32 in the weight file; fit in that precision so the
    # calibration flow and a reloaded store use the identical number
    scale = float(np.float32(span / 255.0))
    zp = int(np.clip(round(-128 - lo / scale), -128, 127))
    return scale, zp


def _weight_qtensor(w: np.ndarray) -> QTensor:
    scale = float(np.abs(w).max()) / 127.0
    if scale <= 0:
        scale = 1.0 / 127.0
    return quantize(w, float(np.float32(scale)), 0)


def build_stores(graph: Graph, master: dict, calib_image: np.ndarray):
    """(fp_store, quantized_store) for a graph and its master weights.

    The fp store carries the float32 masters. The quantized store is built
    by running the quantized pipeline once over the calibration image,
    fitting each layer's requantization and activation ranges in flow
    order, so the stored parameters describe exactly the arithmetic the
    engine will run.
    """
    fp = WeightStore()
    for l in graph.all_layers():
        if l.name not in master:
            continue
        fp.add(fp32_record(f"{l.name}.w", master[l.name]["w"]))
        fp.add(fp32_record(f"{l.name}.b", master[l.name]["b"]))

    q = WeightStore()
    img = prepare_image(calib_image)
    x = _image_qtensor(img)

    def flow_branch(layers, x):
        for l in layers:
            x = _calibrate_layer(l, x, master, q)
        return x

    x = flow_branch(graph.encoder, x)
    for layers in (graph.score, graph.location, graph.descriptor):
        flow_branch(layers, x)
    return fp, q


def _quantized_input(l, x, q):
    if isinstance(x, QTensor):
        return x
    scale, zp = _fit_affine(np.asarray(x, dtype=np.float64))
    q.add(marker_record(f"{l.name}.in", scale, zp))
    return quantize(x, scale, zp)


def _calibrate_layer(l, x, master, q):
    m = master.get(l.name)
    if l.kind == "pool":
        if l.pool_mode != "learned":
            return pool(x, l.pool_mode) if isinstance(x, QTensor) else pool_fp(x, l.pool_mode)
        xq = _quantized_input(l, x, q)
        wq = _weight_qtensor(m["w"])
        xe = xq
        if xq.shape[0] % 2 or xq.shape[1] % 2:
            xe = QTensor(
                np.ascontiguousarray(xq.codes[: xq.shape[0] // 2 * 2, : xq.shape[1] // 2 * 2]),
                xq.scale, xq.zero_point,
            )
        acc = conv2d_int8_raw(xe, wq, ConvParams((2, 2), 2, "valid"))
        pre = acc.astype(np.float64) * (xq.scale * wq.scale) + m["b"].astype(np.float64)
        s, zp = _fit_affine(pre)
        q.add(int8_record(f"{l.name}.w", wq))
        q.add(fp32_record(f"{l.name}.b", m["b"], scale=s, zero_point=zp))
        return quantize(pre, s, zp)

    if l.precision == "fp":
        xf = dequantize(x) if isinstance(x, QTensor) else x
        out = conv2d_fp(xf, m["w"], m["b"], l.params)
        q.add(fp32_record(f"{l.name}.w", m["w"]))
        q.add(fp32_record(f"{l.name}.b", m["b"]))
        return hard_swish(out).astype(np.float32) if l.activation else out

    xq = _quantized_input(l, x, q)
    if l.precision == "int8":
        wq = _weight_qtensor(m["w"])
        acc = conv2d_int8_raw(xq, wq, l.params)
        pre = acc.astype(np.float64) * (xq.scale * wq.scale) + m["b"].astype(np.float64)
        q.add(int8_record(f"{l.name}.w", wq))
    else:  # bin or bin_r
        wb = binarize(master[l.name]["w"].transpose(3, 0, 1, 2).astype(np.float64))
        gain = np.abs(m["w"]).mean(axis=(0, 1, 2)).astype(np.float32)
        counts = conv2d_bin(binarize_codes(xq), wb, l.params)
        pre = counts.astype(np.float64) * gain + m["b"].astype(np.float64)
        q.add(bin_record(f"{l.name}.w", wb))
        q.add(fp32_record(f"{l.name}.g", gain))
        if l.precision == "bin_r":
            if l.in_channels == l.out_channels:
                pre = pre + dequantize(xq).astype(np.float64)
            else:
                pq = _weight_qtensor(m["p"])
                acc = conv2d_int8_raw(xq, pq, ConvParams((1, 1), 1, "valid"))
                pre = pre + acc.astype(np.float64) * (xq.scale * pq.scale)
                q.add(int8_record(f"{l.name}.p", pq))
    s, zp = _fit_affine(pre)
    q.add(fp32_record(f"{l.name}.b", master[l.name]["b"], scale=s, zero_point=zp))
    pre_q = quantize(pre, s, zp)
    if not l.activation:
        return pre_q
    act = hard_swish(pre_q.dequantize().astype(np.float64))
    s2, zp2 = _fit_affine(act)
    q.add(marker_record(f"{l.name}.act", s2, zp2))
    return hard_swish_q(pre_q, s2, zp2)
