"""Checkpoint to weight-store conversion.

Per layer, in execution order, the records the engine expects:

    <name>.in   quant grid marker, only when the layer receives float
    <name>.w    kernel: fp32, int8 (scale |w|max/127), or packed signs
    <name>.g    per-channel gain, binary kinds only
    <name>.p    1x1 int8 residual projection, channel-changing bin_r only
    <name>.b    fp32 bias whose header carries the requantization grid
    <name>.act  activation output grid marker

Weights are folded first (conv + batch norm -> conv) with the engine's
fold_batchnorm, then encoded under the documented quantization rules.
The record stream is a pure function of (checkpoint, manifest), so
re-exporting the same pair is byte-identical.
"""

import numpy as np

from zippypoint.kernels import BatchNormParams, fold_batchnorm

from .checkpoint import Checkpoint
from .errors import ExportError
from .manifest import ExportManifest, validate
from .quant import quant_codes, weight_scale
from .writer import bin_rec, fp32_rec, int8_rec, marker_rec, write_store


def _folded(ck: Checkpoint, m):
    w, bias = ck.conv(m.conv)
    if m.bn is None:
        b = np.zeros(w.shape[-1], dtype=np.float32) if bias is None else bias
        return w, b
    gamma, beta, mean, var = ck.bn(m.bn)
    return fold_batchnorm(w, bias, BatchNormParams(gamma, beta, mean, var))


def _quantized_kernel(name, w):
    s = weight_scale(w)
    return int8_rec(name, quant_codes(w, s, 0), s, 0)


def layer_records(p, m, ck: Checkpoint, grids: dict) -> list:
    """Records for one planned layer, in the order the engine stores them."""
    recs = []
    name = p.name
    if p.needs_in:
        recs.append(marker_rec(f"{name}.in", *grids["in"]))

    w, b = _folded(ck, m)
    l = p.layer

    if l.kind == "pool":  # learned only; plain pools never get here
        recs.append(_quantized_kernel(f"{name}.w", w))
        recs.append(fp32_rec(f"{name}.b", b, *grids["pre"]))
        return recs

    if l.precision == "fp":
        recs.append(fp32_rec(f"{name}.w", w))
        recs.append(fp32_rec(f"{name}.b", b))
        return recs

    if l.precision == "int8":
        recs.append(_quantized_kernel(f"{name}.w", w))
    else:  # bin / bin_r: signs of the folded kernel, filter-major packing
        recs.append(bin_rec(f"{name}.w", w.transpose(3, 0, 1, 2)))
        recs.append(fp32_rec(f"{name}.g", np.abs(w).mean(axis=(0, 1, 2)).astype(np.float32)))
        if p.needs_proj:
            pw, pb = ck.conv(m.proj)
            if pb is not None:
                raise ExportError(
                    f"{m.proj}.bias: residual projections are bias-free in the engine"
                )
            recs.append(_quantized_kernel(f"{name}.p", pw))
    recs.append(fp32_rec(f"{name}.b", b, *grids["pre"]))
    if p.needs_act:
        recs.append(marker_rec(f"{name}.act", *grids["act"]))
    return recs


def export(ck: Checkpoint, manifest: ExportManifest, out_path) -> int:
    """Write the weight store. Returns the number of records written."""
    _, plans = validate(manifest)
    records = []
    for p in plans:
        if not p.needs_weights:
            continue
        records.extend(
            layer_records(p, manifest.layers[p.name], ck, manifest.grids.get(p.name, {}))
        )
    write_store(records, out_path)
    return len(records)
