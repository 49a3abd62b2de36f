"""Graph construction and execution for both arithmetic paths.

``build`` turns a NetworkSpec into a flat layer program: an encoder chain
and three decoder branches that all read the encoder output. ``forward``
runs the native mixed-precision program against a weight store;
``forward_fp`` runs the same structure in float32 against fp32 records and
serves as the reference path. ``forward_trace`` returns every intermediate
tensor, which is what fixture generation and cross-engine checks consume.

Data moving between layers is either a QTensor or a float32 array. Each
quantized layer knows how to take both: quantized producers hand codes
over directly (scales agree by calibration), float producers go through
the layer's recorded input quantization.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, FormatError, InvalidInputError
from ..kernels import (
    ConvParams,
    conv2d_bin,
    conv2d_bin_residual,
    conv2d_fp,
    conv2d_int8,
    conv2d_int8_raw,
    hard_swish,
    hard_swish_q,
    pool,
    pool_fp,
)
from ..qtensor import QTensor, binarize_codes, dequantize, quantize
from .config import CELL, NetworkSpec

IMAGE_SCALE = 1.0 / 255.0
IMAGE_ZERO_POINT = -128  # uint8 pixel u maps losslessly to code u - 128


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str  # conv | pool
    precision: str  # fp | int8 | bin | bin_r (pools: fp-compatible mode below)
    in_channels: int
    out_channels: int
    params: ConvParams | None = None
    activation: bool = False
    pool_mode: str | None = None

    @property
    def is_conv(self) -> bool:
        return self.kind == "conv"


@dataclass(frozen=True)
class Graph:
    spec: NetworkSpec
    encoder: tuple
    score: tuple
    location: tuple
    descriptor: tuple

    @property
    def branches(self) -> dict:
        return {"score": self.score, "location": self.location, "descriptor": self.descriptor}

    def all_layers(self):
        return list(self.encoder) + list(self.score) + list(self.location) + list(self.descriptor)

    def layer(self, name: str) -> LayerDef:
        for l in self.all_layers():
            if l.name == name:
                return l
        raise KeyError(f"no layer named {name!r}")

    def mac_count(self, height: int, width: int) -> int:
        """Multiply-accumulate count of one forward at the given input size."""
        total = 0
        h, w = height, width
        for l in self.encoder:
            if l.kind == "pool":
                if l.pool_mode == "learned":
                    total += (h // 2) * (w // 2) * 4 * l.in_channels * l.out_channels
                h, w = h // 2, w // 2
            else:
                kh, kw = l.params.kernel
                total += h * w * kh * kw * l.in_channels * l.out_channels
        for branch in (self.score, self.location, self.descriptor):
            for l in branch:
                kh, kw = l.params.kernel
                total += h * w * kh * kw * l.in_channels * l.out_channels
        return total


def build(spec: NetworkSpec) -> Graph:
    """Lay out the layer program for a spec. Pure structure, no weights."""
    if not isinstance(spec, NetworkSpec):
        raise ConfigurationError(f"expected a NetworkSpec, got {type(spec).__name__}")
    c1, c2, c3, c4 = spec.channels
    enc_io = [
        (3, c1), (c1, c1),
        (c1, c2), (c2, c2),
        (c2, c3), (c3, c3),
        (c3, c4), (c4, c4),
    ]
    convs = []
    for i, (ci, co) in enumerate(enc_io):
        precision = spec.first_conv if i == 0 else spec.encoder
        convs.append(
            LayerDef(
                name=f"enc{i}",
                kind="conv",
                precision=precision,
                in_channels=ci,
                out_channels=co,
                params=ConvParams((3, 3), 1, "same"),
                activation=True,
            )
        )

    def pool_layer(idx, ch):
        return LayerDef(
            name=f"pool{idx}",
            kind="pool",
            precision="int8" if spec.pool_mode == "learned" else "fp",
            in_channels=ch,
            out_channels=ch,
            pool_mode=spec.pool_mode,
        )

    encoder = []
    if spec.pool_placement == "early":
        # downsample ahead of each of the first three blocks
        order = [pool_layer(0, 3), convs[0], convs[1],
                 pool_layer(1, c1), convs[2], convs[3],
                 pool_layer(2, c2), convs[4], convs[5],
                 convs[6], convs[7]]
    else:
        order = [convs[0], convs[1], pool_layer(0, c1),
                 convs[2], convs[3], pool_layer(1, c2),
                 convs[4], convs[5], pool_layer(2, c3),
                 convs[6], convs[7]]
    encoder.extend(order)

    def branch(prefix, precision_head, widths, kernels):
        layers = []
        n = len(widths)
        for i, ((ci, co), kk) in enumerate(zip(widths, kernels)):
            last = i == n - 1
            layers.append(
                LayerDef(
                    name=f"{prefix}{i}",
                    kind="conv",
                    precision=precision_head if last else spec.decoder,
                    in_channels=ci,
                    out_channels=co,
                    params=ConvParams(kk, 1, "same"),
                    activation=not last,
                )
            )
        return tuple(layers)

    score = branch("score", spec.score_head, [(c4, c4), (c4, 1)], [(3, 3), (1, 1)])
    location = branch("loc", spec.location_head, [(c4, c4), (c4, 2)], [(3, 3), (1, 1)])
    descriptor = branch(
        "desc",
        spec.descriptor_head,
        [(c4, c4), (c4, c4), (c4, c4), (c4, spec.descriptor_dim)],
        [(3, 3), (1, 1), (1, 1), (1, 1)],
    )
    return Graph(spec, tuple(encoder), score, location, descriptor)


def prepare_image(image: np.ndarray) -> np.ndarray:
    """uint8 image to (h, w, 3), padded up to a multiple of the cell size."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise InvalidInputError(f"expected a uint8 image, got {img.dtype}")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected (h, w) or (h, w, 3), got {img.shape}")
    h, w = img.shape[:2]
    if h < 2 * CELL or w < 2 * CELL:
        raise InvalidInputError(f"image {h}x{w} smaller than {2 * CELL} pixels per side")
    ph = (-h) % CELL
    pw = (-w) % CELL
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return img


def _image_qtensor(img: np.ndarray) -> QTensor:
    codes = (img.astype(np.int16) - 128).astype(np.int8)
    return QTensor(codes, IMAGE_SCALE, IMAGE_ZERO_POINT)


def _image_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) * np.float32(IMAGE_SCALE)


def _need(store, name):
    if name not in store:
        raise FormatError(f"weight store is missing record {name!r}")
    return store[name]


def _as_quantized(x, layer, store):
    if isinstance(x, QTensor):
        return x
    rec = _need(store, f"{layer.name}.in")
    return quantize(x, rec.scale, rec.zero_point)


def _as_float(x):
    return dequantize(x) if isinstance(x, QTensor) else x


def _run_layer_native(layer: LayerDef, x, store):
    if layer.kind == "pool":
        if layer.pool_mode == "learned":
            xq = _as_quantized(x, layer, store)
            w = _need(store, f"{layer.name}.w").as_qtensor()
            b = _need(store, f"{layer.name}.b")
            return pool(xq, "learned", w=w, bias=b.as_array(),
                        out_scale=b.scale, out_zero_point=b.zero_point)
        if isinstance(x, QTensor):
            return pool(x, layer.pool_mode)
        return pool_fp(x, layer.pool_mode)

    if layer.precision == "fp":
        xf = _as_float(x)
        w = _need(store, f"{layer.name}.w").as_array()
        b = _need(store, f"{layer.name}.b").as_array()
        out = conv2d_fp(xf, w, b, layer.params)
        return hard_swish(out).astype(np.float32) if layer.activation else out

    if layer.precision == "int8":
        xq = _as_quantized(x, layer, store)
        w = _need(store, f"{layer.name}.w").as_qtensor()
        b = _need(store, f"{layer.name}.b")
        pre = conv2d_int8(xq, w, b.as_array(), layer.params, b.scale, b.zero_point)
    else:  # bin or bin_r
        xq = _as_quantized(x, layer, store)
        w = _need(store, f"{layer.name}.w").as_bits()
        g = _need(store, f"{layer.name}.g").as_array()
        b = _need(store, f"{layer.name}.b")
        if layer.precision == "bin":
            counts = conv2d_bin(binarize_codes(xq), w, layer.params)
            pre = quantize(
                counts * g.astype(np.float64) + b.as_array(), b.scale, b.zero_point
            )
        else:
            proj = None
            if layer.in_channels != layer.out_channels:
                proj = _need(store, f"{layer.name}.p").as_qtensor()
            pre = conv2d_bin_residual(
                xq, w, g, b.as_array(), layer.params, b.scale, b.zero_point, res_proj=proj
            )
    if not layer.activation:
        return pre
    act = _need(store, f"{layer.name}.act")
    return hard_swish_q(pre, act.scale, act.zero_point)


def _run_layer_fp(layer: LayerDef, x, store):
    if layer.kind == "pool":
        if layer.pool_mode == "learned":
            w = _need(store, f"{layer.name}.w").as_array()
            b = _need(store, f"{layer.name}.b").as_array()
            return pool_fp(x, "learned", w=w, bias=b)
        return pool_fp(x, layer.pool_mode)
    w = _need(store, f"{layer.name}.w").as_array()
    b = _need(store, f"{layer.name}.b").as_array()
    out = conv2d_fp(x, w, b, layer.params)
    return hard_swish(out).astype(np.float32) if layer.activation else out


def _execute(graph: Graph, store, image: np.ndarray, runner, entry):
    img = prepare_image(image)
    trace = {}
    x = entry(img)
    for layer in graph.encoder:
        x = runner(layer, x, store)
        trace[layer.name] = x
    heads = {}
    for branch_name, layers in graph.branches.items():
        y = x
        for layer in layers:
            y = runner(layer, y, store)
            trace[layer.name] = y
        heads[branch_name] = y
    heads["image_size"] = (image.shape[1], image.shape[0])  # (w, h) before padding
    return heads, trace


def forward(graph: Graph, store, image: np.ndarray) -> dict:
    """Native mixed-precision forward. Returns raw head maps plus the
    original (w, h) under "image_size"."""
    heads, _ = _execute(graph, store, image, _run_layer_native, _image_qtensor)
    return heads


def forward_fp(graph: Graph, store, image: np.ndarray) -> dict:
    """Reference forward: identical structure, float32 everywhere."""
    heads, _ = _execute(graph, store, image, _run_layer_fp, _image_float)
    return heads


def forward_trace(graph: Graph, store, image: np.ndarray, fp: bool = False):
    """Forward plus every intermediate activation, keyed by layer name."""
    runner = _run_layer_fp if fp else _run_layer_native
    entry = _image_float if fp else _image_qtensor
    return _execute(graph, store, image, runner, entry)
