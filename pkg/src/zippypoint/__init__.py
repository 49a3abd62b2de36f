"""Mixed-precision keypoint detection with packed binary descriptors."""

__version__ = "0.1.0"

from .qtensor import BitTensor, QTensor, binarize, dequantize, pack_bits, quantize, unpack_bits

__all__ = [
    "BitTensor",
    "QTensor",
    "binarize",
    "dequantize",
    "pack_bits",
    "quantize",
    "unpack_bits",
    "__version__",
]
