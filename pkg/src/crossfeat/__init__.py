"""Cross-modal keypoint detection, description, matching and registration."""

from .features import KeypointSet, MatchSet, match_bidirectional, select_keypoints
from .geometry import (
    CorrespondenceBatch,
    Homography,
    TransformConfig,
    build_correspondences,
    project,
    sample_homography,
    warp_image,
    warp_map,
)
from .model import DenseFeatures, FeatureNet, load_checkpoint, save_checkpoint
from .training import SyntheticPairDataset, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceBatch",
    "DenseFeatures",
    "FeatureNet",
    "Homography",
    "KeypointSet",
    "MatchSet",
    "SyntheticPairDataset",
    "TrainConfig",
    "TransformConfig",
    "build_correspondences",
    "load_checkpoint",
    "match_bidirectional",
    "project",
    "sample_homography",
    "save_checkpoint",
    "select_keypoints",
    "train",
    "warp_image",
    "warp_map",
    "__version__",
]
