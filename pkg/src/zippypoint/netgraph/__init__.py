from .config import NetworkSpec, baseline_spec, zippypoint_spec
from .decode import Detection, decode, load_detections, save_detections
from .graph import Graph, LayerDef, build, forward, forward_fp, forward_trace
from .weights import WeightRecord, WeightStore, load_weights, save_weights
from .fixtures import build_stores, random_master, synthetic_image

__all__ = [
    "Detection",
    "Graph",
    "LayerDef",
    "NetworkSpec",
    "WeightRecord",
    "WeightStore",
    "baseline_spec",
    "build",
    "build_stores",
    "decode",
    "forward",
    "forward_fp",
    "forward_trace",
    "load_detections",
    "load_weights",
    "random_master",
    "save_detections",
    "save_weights",
    "synthetic_image",
    "zippypoint_spec",
]
