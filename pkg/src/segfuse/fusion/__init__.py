"""Dense per-category reconstruction: TSDF grid, ray casting, tracking,
meshing, and the frame-to-model fusion loop."""

from .grid import (  # noqa: F401
    VoxelBlockGrid,
    estimate_depth_noise,
    integrate,
    load_checkpoint,
    save_checkpoint,
    smooth_depth,
)
from .raycast import RaycastContext, SynthesizedFrame, raycast  # noqa: F401
from .odometry import (  # noqa: F401
    OdometryConfig,
    OdometryResult,
    TrackingLostError,
    point_to_plane_system,
    track_frame,
    twist_to_pose,
)
from .meshing import (  # noqa: F401
    TriangleMesh,
    dense_embed,
    extract_mesh,
    extract_points,
    save_mesh_obj,
    save_mesh_ply,
)
from .stream import FrameRecord, FusionConfig, FusionReport, fuse_stream  # noqa: F401
