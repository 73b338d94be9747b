"""Multi-view pseudo-labels from posed RGB-D episodes and sparse confident detections."""

from .geometry import Intrinsics, Pose, estimate_rigid_transform, project_points, unproject_frame
from .ingest import Detection, Episode, LabeledCloud, PosedFrame, build_partitioned_cloud, load_episode
from .labelgen import Box3D, PseudoLabelSet, generate_pseudolabels, min_area_rectangle
from .segment3d import CrfParams, SegmentConfig, crf_refine, segment_object, train_unary

__version__ = "0.1.0"
