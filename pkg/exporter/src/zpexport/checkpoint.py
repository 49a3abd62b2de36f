"""Checkpoint access: npz archives of framework-layout tensors.

Convolution kernels arrive as (out, in, kh, kw) and are transposed to
the engine's (kh, kw, in, out) on the way through. Batch norm tensors
keep the usual naming: "<prefix>.weight" is gamma, "<prefix>.bias" is
beta, plus running_mean / running_var.
"""

import zipfile

import numpy as np

from .errors import ExportError, MissingTensorError


class Checkpoint:
    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __contains__(self, key):
        return key in self.tensors

    def get(self, key: str) -> np.ndarray:
        if key not in self.tensors:
            raise MissingTensorError(f"checkpoint has no tensor {key!r}")
        return np.asarray(self.tensors[key])

    def conv(self, prefix: str):
        """(kh, kw, cin, cout) float32 kernel and bias (or None)."""
        w = self.get(f"{prefix}.weight")
        if w.ndim != 4:
            raise ExportError(f"{prefix}.weight: expected a 4-d kernel, got shape {w.shape}")
        w = np.ascontiguousarray(w.transpose(2, 3, 1, 0), dtype=np.float32)
        bias = None
        if f"{prefix}.bias" in self:
            bias = np.asarray(self.tensors[f"{prefix}.bias"], dtype=np.float32)
            if bias.shape != (w.shape[3],):
                raise ExportError(
                    f"{prefix}.bias: shape {bias.shape} does not match {w.shape[3]} filters"
                )
        return w, bias

    def bn(self, prefix: str):
        """(gamma, beta, mean, var) float32 vectors."""
        return tuple(
            np.asarray(self.get(f"{prefix}.{part}"), dtype=np.float32)
            for part in ("weight", "bias", "running_mean", "running_var")
        )


def load_checkpoint(path) -> Checkpoint:
    try:
        z = np.load(path)
    except (ValueError, zipfile.BadZipFile, EOFError) as e:
        raise ExportError(f"{path}: not a readable npz checkpoint ({e})") from None
    if not hasattr(z, "files"):
        raise ExportError(f"{path}: expected an npz archive, got a bare array")
    with z:
        return Checkpoint({k: z[k] for k in z.files})


def save_checkpoint(tensors: dict, path):
    np.savez(path, **tensors)
