from .homography import (
    AugmentationConfig,
    Homography,
    apply_photometric,
    sample_homography,
    warp_image,
    warp_points,
)
from .estimate import RansacConfig, estimate_homography
from .metrics import (
    MetricReport,
    corner_error,
    homography_accuracy,
    localization_error,
    matching_score,
    repeatability,
)
from .sequences import (
    load_hpatches_sequence,
    make_detector,
    make_synthetic_dataset,
    run_sequence_eval,
)

__all__ = [
    "AugmentationConfig",
    "Homography",
    "MetricReport",
    "RansacConfig",
    "apply_photometric",
    "corner_error",
    "estimate_homography",
    "homography_accuracy",
    "load_hpatches_sequence",
    "localization_error",
    "make_detector",
    "make_synthetic_dataset",
    "matching_score",
    "repeatability",
    "run_sequence_eval",
    "sample_homography",
    "warp_image",
    "warp_points",
]
