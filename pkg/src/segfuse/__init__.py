"""Streaming segmented RGB-D capture with per-category volumetric fusion.

Client side: sample keyframes, suppress duplicate instance masks, cut
per-object RGB-D crops, and stream them over an ack-gated TCP protocol.
Server side: route crops to one fusion worker per category, integrate them
into sparse TSDF voxel grids with frame-to-model tracking, then extract
and split per-instance triangle meshes. A deterministic scene simulator
replaces the camera and the segmenter for development and testing.
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    Intrinsics,
    PointCloud,
    Pose,
    RGBDFrame,
    back_project,
    compose,
    inverse,
    transform_points,
)
from .segmentation import Detection, ObjectCrop, apply_masks, mask_iou, suppress_masks  # noqa: F401
from .container import SegmentPacket, pack, unpack  # noqa: F401
