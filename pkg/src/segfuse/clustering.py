"""Splitting a fused category model into individual object instances.

A category grid usually holds several objects (all the chairs) plus
whatever support surfaces leaked into the masks. The split runs on the
extracted surface points: optional RANSAC removal of dominant planes
(floors, walls), DBSCAN over the remainder, then marching cubes over each
cluster's blocks, giving one mesh per physical object.

DBSCAN uses a uniform grid of cell size eps for neighbor lookups, so the
epsilon-ball query touches at most 27 cells. Border points attach to the
cluster of their nearest core point, which makes the labeling independent
of input order (classical first-come assignment is not).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import PointCloud
from .fusion import TriangleMesh, VoxelBlockGrid, extract_mesh, extract_points

NOISE = -1


class DegenerateInputError(ValueError):
    """Input cannot support the requested model (e.g. collinear points)."""


@dataclass
class PlaneModel:
    """Plane n . p + d = 0 with its supporting inliers."""

    normal: np.ndarray
    offset: float
    inliers: np.ndarray
    threshold: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(self.normal)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        self.inliers = np.asarray(self.inliers, dtype=np.int64).reshape(-1)

    def distances(self, points: np.ndarray) -> np.ndarray:
        return np.abs(points @ self.normal + self.offset)


@dataclass
class ClusterLabeling:
    labels: np.ndarray
    count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        used = set(self.labels[self.labels >= 0].tolist())
        if used and (min(used) < 0 or max(used) >= self.count):
            raise ValueError("cluster ids out of range")

    def cluster_indices(self, cluster_id: int) -> np.ndarray:
        return np.nonzero(self.labels == cluster_id)[0]


@dataclass
class SplitParams:
    eps: Optional[float] = None  # defaults to 3 * voxel_size
    min_points: int = 10
    plane_distance: Optional[float] = None  # defaults to 1.5 * voxel_size
    ransac_iterations: int = 1000
    plane_min_fraction: float = 0.15
    max_planes: int = 3
    min_cluster_points: int = 50
    seed: int = 0


def ransac_plane(cloud: PointCloud, dist_threshold: float,
                 iterations: int = 1000, seed: int = 0) -> PlaneModel:
    """Best-of-k plane from random 3-point samples, least-squares refit.

    Deterministic for a fixed seed. Raises on fewer than 3 points or when
    every sampled triple is collinear.
    """
    points = cloud.points
    n = len(points)
    if n < 3:
        raise DegenerateInputError(f"plane fit needs >= 3 points, got {n}")
    rng = np.random.default_rng(seed)
    best_count = -1
    best = None
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        a, b, c = points[idx]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        offset = -float(normal @ a)
        count = int((np.abs(points @ normal + offset) <= dist_threshold).sum())
        if count > best_count:
            best_count = count
            best = (normal, offset)
    if best is None:
        raise DegenerateInputError("all RANSAC samples were collinear")

    # least-squares refit on the consensus set: centroid + smallest
    # principal direction
    normal, offset = best
    inliers = np.nonzero(np.abs(points @ normal + offset) <= dist_threshold)[0]
    support = points[inliers]
    centroid = support.mean(axis=0)
    centered = support - centroid
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    refit_normal = vt[-1]
    refit_normal /= np.linalg.norm(refit_normal)
    if refit_normal @ normal < 0:
        refit_normal = -refit_normal
    refit_offset = -float(refit_normal @ centroid)
    inliers = np.nonzero(np.abs(points @ refit_normal + refit_offset) <= dist_threshold)[0]
    return PlaneModel(normal=refit_normal, offset=refit_offset,
                      inliers=inliers, threshold=dist_threshold)


def _grid_cells(points: np.ndarray, eps: float) -> Dict[Tuple[int, int, int], np.ndarray]:
    cells: Dict[Tuple[int, int, int], list] = {}
    keys = np.floor(points / eps).astype(np.int64)
    for i, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(i)
    return {k: np.asarray(v) for k, v in cells.items()}


def dbscan(cloud: PointCloud, eps: float, min_points: int) -> ClusterLabeling:
    """Density clustering: cores have >= min_points neighbors within eps
    (self included); clusters are connected components of cores, border
    points join their nearest core, the rest is noise (-1)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    points = cloud.points
    n = len(points)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return ClusterLabeling(labels=labels, count=0)

    cells = _grid_cells(points, eps)
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]

    # neighbor lists computed cell by cell: every point in a cell shares
    # the same 27-cell candidate set, so one distance matrix serves all
    neighbor_cache: List[Optional[np.ndarray]] = [None] * n
    eps2 = eps * eps
    for (kx, ky, kz), members in cells.items():
        candidates = [cells[key] for key in
                      ((kx + dx, ky + dy, kz + dz) for dx, dy, dz in offsets)
                      if key in cells]
        cand = np.concatenate(candidates)
        d2 = np.sum((points[members][:, None, :] - points[cand][None, :, :]) ** 2, axis=2)
        within = d2 <= eps2
        for row, i in enumerate(members):
            neighbor_cache[i] = cand[within[row]]
    core = np.array([len(nb) >= min_points for nb in neighbor_cache])

    # connected components of core points via BFS over core-core edges
    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        frontier = [i]
        labels[i] = cluster
        while frontier:
            j = frontier.pop()
            for k in neighbor_cache[j]:
                if core[k] and labels[k] == NOISE:
                    labels[k] = cluster
                    frontier.append(k)
        cluster += 1

    # border points: nearest core neighbor decides, independent of order
    for i in range(n):
        if core[i] or labels[i] != NOISE:
            continue
        nb = neighbor_cache[i]
        nb_core = nb[core[nb]]
        if len(nb_core) == 0:
            continue
        d2 = np.sum((points[nb_core] - points[i]) ** 2, axis=1)
        order = np.lexsort((nb_core, d2))
        labels[i] = labels[nb_core[order[0]]]
    return ClusterLabeling(labels=labels, count=cluster)


def remove_planes(cloud: PointCloud, params: SplitParams,
                  voxel_size: float) -> Tuple[PointCloud, List[PlaneModel]]:
    """Strip up to max_planes dominant planes (floors, walls) from a cloud."""
    threshold = params.plane_distance or 1.5 * voxel_size
    planes: List[PlaneModel] = []
    remaining = cloud
    keep_index = np.arange(len(cloud))
    for k in range(params.max_planes):
        if len(remaining) < max(3, params.min_points):
            break
        plane = ransac_plane(remaining, threshold, params.ransac_iterations,
                             seed=params.seed + k)
        if len(plane.inliers) < params.plane_min_fraction * len(remaining):
            break
        planes.append(plane)
        mask = np.ones(len(remaining), dtype=bool)
        mask[plane.inliers] = False
        remaining = PointCloud(
            points=remaining.points[mask],
            colors=None if remaining.colors is None else remaining.colors[mask],
        )
        keep_index = keep_index[mask]
    return remaining, planes


def split_instances(grid: VoxelBlockGrid,
                    params: Optional[SplitParams] = None) -> List[Tuple[int, TriangleMesh]]:
    """One (instance id, mesh) per spatially separate object in the grid.

    Surface points are extracted, dominant planes optionally removed, the
    remainder density-clustered; each surviving cluster masks the grid to
    its blocks and is re-meshed individually. Touching objects closer than
    eps merge (density connectivity cannot separate them).
    """
    params = params or SplitParams()
    if grid.count == 0:
        return []
    eps = params.eps or 3.0 * grid.voxel_size
    cloud = extract_points(grid)
    if len(cloud) == 0:
        return []
    remaining, _planes = (remove_planes(cloud, params, grid.voxel_size)
                          if params.max_planes > 0 else (cloud, []))
    if len(remaining) == 0:
        return []
    labeling = dbscan(remaining, eps=eps, min_points=params.min_points)

    out = []
    instance = 0
    edge = grid.block_edge
    for cid in range(labeling.count):
        idx = labeling.cluster_indices(cid)
        if len(idx) < params.min_cluster_points:
            continue
        blocks = np.unique(
            np.floor(remaining.points[idx] / grid.block_size).astype(np.int64), axis=0)
        # include face-adjacent blocks so marching cubes can close cube
        # cells that straddle a block border
        shifts = np.array([(dx, dy, dz)
                           for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)])
        expanded = np.unique((blocks[:, None, :] + shifts[None, :, :]).reshape(-1, 3), axis=0)
        sub = grid.subgrid(expanded)
        # drop voxels of the sub-grid farther than eps from the cluster:
        # another instance sharing a neighbor block must not leak in
        mesh = extract_mesh(sub)
        if len(mesh.triangles) == 0:
            continue
        keep = _near_cluster(mesh.vertices, remaining.points[idx], eps)
        mesh = _filter_mesh(mesh, keep)
        if len(mesh.triangles) == 0:
            continue
        out.append((instance, mesh))
        instance += 1
    return out


def _pack(cells: np.ndarray) -> np.ndarray:
    bias = 1 << 20
    c = cells + bias
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def _near_cluster(vertices: np.ndarray, cluster: np.ndarray, eps: float) -> np.ndarray:
    """Vertices whose eps-cell neighborhood contains a cluster point.

    Cell-level test: keeps everything within eps and nothing farther than
    about 3.5 eps, which is enough to fence off other instances.
    """
    occupied = np.unique(_pack(np.floor(cluster / eps).astype(np.int64)))
    vcells = np.floor(vertices / eps).astype(np.int64)
    keep = np.zeros(len(vertices), dtype=bool)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                keys = _pack(vcells + np.array([dx, dy, dz]))
                keep |= np.isin(keys, occupied)
    return keep


def _filter_mesh(mesh: TriangleMesh, vertex_keep: np.ndarray) -> TriangleMesh:
    tri_keep = vertex_keep[mesh.triangles].all(axis=1)
    triangles = mesh.triangles[tri_keep]
    used = np.unique(triangles)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(
        vertices=mesh.vertices[used],
        triangles=remap[triangles],
        colors=None if mesh.colors is None else mesh.colors[used],
    )


def color_by_cluster(cloud: PointCloud, labeling: ClusterLabeling) -> PointCloud:
    """Debug coloring: one fixed color per cluster id, gray for noise."""
    palette = np.array([
        (0.90, 0.10, 0.10), (0.10, 0.70, 0.20), (0.15, 0.35, 0.95),
        (0.95, 0.75, 0.10), (0.80, 0.20, 0.80), (0.10, 0.80, 0.80),
        (0.95, 0.45, 0.10), (0.55, 0.35, 0.20),
    ])
    colors = np.full((len(cloud), 3), 0.5)
    ok = labeling.labels >= 0
    colors[ok] = palette[labeling.labels[ok] % len(palette)]
    return PointCloud(points=cloud.points.copy(), colors=colors)
