"""Camera model, rigid poses, and depth-image back-projection.

Conventions used everywhere in this package:

* camera frame: +Z forward (viewing direction), +X right, +Y down
* pixel (u, v): u along image width, v along height
* a pose is the 4x4 rigid transform mapping camera coordinates to world
  coordinates, in meters
* depth images store integer depth units; ``depth_scale`` converts them to
  meters; a stored value of 0 marks an invalid pixel
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters plus image size and depth unit scale."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.001

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def matrix(self) -> np.ndarray:
        """3x3 intrinsic matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics of the image resized by ``factor`` (0.5 = half size)."""
        return Intrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
            depth_scale=self.depth_scale,
        )


class Pose:
    """Rigid transform (rotation + translation) stored as a 4x4 matrix.

    Maps points in camera coordinates to world coordinates. Immutable:
    the wrapped array is read-only so poses can be shared between threads.
    """

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("pose matrix must be 4x4")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation block must be proper (det +1)")
        if not np.allclose(m[3], (0.0, 0.0, 0.0, 1.0), atol=_ORTHO_TOL):
            raise ValueError("last row must be (0, 0, 0, 1)")
        m = m.copy()
        # snap to the nearest exact rotation so long compositions cannot
        # drift out of SO(3)
        u, _, vt = np.linalg.svd(r)
        m[:3, :3] = u @ vt
        m[3] = (0.0, 0.0, 0.0, 1.0)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(4))

    @staticmethod
    def from_rt(rotation, translation) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = np.asarray(rotation, dtype=np.float64)
        m[:3, 3] = np.asarray(translation, dtype=np.float64)
        return Pose(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def __eq__(self, other):
        return isinstance(other, Pose) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())

    def __repr__(self):
        t = self.translation
        return f"Pose(t=[{t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}])"


def compose(a: Pose, b: Pose) -> Pose:
    """Rigid composition: (compose(a, b)).apply(p) == a.apply(b.apply(p))."""
    return Pose(a.matrix @ b.matrix)


def inverse(p: Pose) -> Pose:
    r = p.rotation.T
    return Pose.from_rt(r, -r @ p.translation)


@dataclass(frozen=True)
class RGBDFrame:
    """A registered color + depth image pair, the unit of capture.

    ``depth`` holds raw sensor units (uint16); multiply by
    ``intrinsics.depth_scale`` for meters. Zero depth marks invalid pixels.
    ``pose_hint`` optionally carries ground truth (simulator) or external
    odometry; it is transported but never required by consumers.
    """

    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics
    timestamp: int
    pose_hint: Optional[Pose] = None

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.rgb.shape != (h, w, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} != ({h}, {w}, 3)")
        if self.depth.shape != (h, w):
            raise ValueError(f"depth shape {self.depth.shape} != ({h}, {w})")
        if self.rgb.dtype != np.uint8:
            raise ValueError("rgb must be uint8")
        if self.depth.dtype != np.uint16:
            raise ValueError("depth must be uint16")

    def depth_meters(self) -> np.ndarray:
        """Depth in meters as float64, zeros where invalid."""
        return self.depth.astype(np.float64) * self.intrinsics.depth_scale


@dataclass
class PointCloud:
    """N points in meters with optional per-point colors and labels."""

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors length must match points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ValueError("labels length must match points")

    def __len__(self):
        return len(self.points)


def back_project(frame: RGBDFrame) -> PointCloud:
    """Convert every valid depth pixel to a 3D point in camera coordinates.

    X = (u - cx) * z / fx, Y = (v - cy) * z / fy, Z = z where
    z = depth * depth_scale. Pixels with zero depth are skipped. Point order
    follows a row-major scan of the image.
    """
    intr = frame.intrinsics
    valid = frame.depth > 0
    vs, us = np.nonzero(valid)
    z = frame.depth[vs, us].astype(np.float64) * intr.depth_scale
    x = (us - intr.cx) * z / intr.fx
    y = (vs - intr.cy) * z / intr.fy
    points = np.stack([x, y, z], axis=1)
    colors = frame.rgb[vs, us].astype(np.float64) / 255.0
    return PointCloud(points=points, colors=colors)


def project_points(points: np.ndarray, intrinsics: Intrinsics):
    """Pinhole projection of (N, 3) camera-frame points.

    Returns (u, v, z) float arrays; points behind the camera get z <= 0 and
    must be filtered by the caller.
    """
    pts = np.asarray(points, dtype=np.float64)
    z = pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pts[:, 0] / z * intrinsics.fx + intrinsics.cx
        v = pts[:, 1] / z * intrinsics.fy + intrinsics.cy
    return u, v, z


def transform_points(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Map every point by p' = R p + t, preserving colors and labels."""
    return PointCloud(
        points=pose.apply(cloud.points),
        colors=None if cloud.colors is None else cloud.colors.copy(),
        labels=None if cloud.labels is None else cloud.labels.copy(),
    )


# --- PLY point cloud I/O (binary little-endian, x y z + red green blue) ---

_PLY_POINT_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
     ("red", "u1"), ("green", "u1"), ("blue", "u1")]
)


def save_point_cloud_ply(cloud: PointCloud, path) -> None:
    n = len(cloud)
    if cloud.colors is not None:
        colors = np.clip(cloud.colors * 255.0 + 0.5, 0, 255).astype(np.uint8)
    else:
        colors = np.full((n, 3), 255, dtype=np.uint8)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    rec = np.empty(n, dtype=_PLY_POINT_DTYPE)
    pts = cloud.points.astype(np.float32)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def load_point_cloud_ply(path) -> PointCloud:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    n = 0
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.startswith("format") and "binary_little_endian" not in line:
            raise ValueError(f"{path}: unsupported PLY format")
    body = data[end + len(b"end_header\n"):]
    if len(body) < n * _PLY_POINT_DTYPE.itemsize:
        raise ValueError(f"{path}: truncated PLY body")
    rec = np.frombuffer(body[: n * _PLY_POINT_DTYPE.itemsize], dtype=_PLY_POINT_DTYPE)
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    return PointCloud(points=points, colors=colors)
