"""Small numeric helpers for the export pipeline.

The engine documents its encoding rules (round half away from zero,
weight scale |w|max / 127 stored as float32, symmetric clamp); these
reimplement them locally so the simulator never touches engine code.
fold_bn is the simulator's folding; the export path folds through the
engine's own fold_batchnorm, which gives the fixture cross-check two
independent folding routes to disagree through.
"""

import numpy as np


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x))


def quant_codes(values, scale: float, zero_point: int) -> np.ndarray:
    q = round_half_away(np.asarray(values, dtype=np.float64) / scale) + int(zero_point)
    return np.clip(q, -128, 127).astype(np.int8)


def weight_scale(w) -> float:
    s = float(np.abs(w).max()) / 127.0
    if s <= 0:
        s = 1.0 / 127.0
    return float(np.float32(s))


def fold_bn(w, bias, gamma, beta, mean, var, eps: float = 0.0):
    """(w', b') float32 with the batch norm absorbed into the conv."""
    g = np.asarray(gamma, dtype=np.float64) / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    b = np.zeros(w.shape[-1]) if bias is None else np.asarray(bias, dtype=np.float64)
    w2 = np.asarray(w, dtype=np.float64) * g
    b2 = (b - np.asarray(mean, dtype=np.float64)) * g + np.asarray(beta, dtype=np.float64)
    return w2.astype(np.float32), b2.astype(np.float32)
