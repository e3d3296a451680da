"""Crowd-scene anomaly detection from short-term particle trajectories.

Optical flow is integrated into short particle trajectories per clip, each
patch's trajectories are summarised by a polar shape histogram, and patches
are scored with a Gaussian fitted to the chi-square similarities among their
K nearest training histograms.
"""

from .descriptor import (
    DescriptorParams,
    PatchGrid,
    ShapeHistogram,
    TrajectoryShapeDescriptor,
    bin_of,
    build_grid,
    describe_clip,
    describe_patch,
    split,
)
from .detector import (
    DetectionGrid,
    DetectorConfig,
    ShapeKnnAnomalyDetector,
    TemporalModel,
    detect_clip,
    train,
)
from .flow_io import FlowEstimatorConfig, FlowField, estimate_flow, read_flo, read_pgm, write_flo
from .knn_stat import KnnGaussian, chi2, fit_gaussian, is_anomalous, joint_score, knn_retrieve
from .trajectory import Clip, TrajectorySet, advect, segment_clips

__version__ = "0.1.0"

__all__ = [
    "Clip",
    "DescriptorParams",
    "DetectionGrid",
    "DetectorConfig",
    "FlowEstimatorConfig",
    "FlowField",
    "KnnGaussian",
    "PatchGrid",
    "ShapeHistogram",
    "ShapeKnnAnomalyDetector",
    "TemporalModel",
    "TrajectorySet",
    "TrajectoryShapeDescriptor",
    "advect",
    "bin_of",
    "build_grid",
    "chi2",
    "describe_clip",
    "describe_patch",
    "detect_clip",
    "estimate_flow",
    "fit_gaussian",
    "is_anomalous",
    "joint_score",
    "knn_retrieve",
    "read_flo",
    "read_pgm",
    "segment_clips",
    "split",
    "train",
    "write_flo",
]
