"""Surface extraction from the TSDF grid.

Marching cubes runs on the voxel-center lattice: each cell spans 8
neighboring voxel centers and is polygonized only when all 8 carry enough
integration weight, so unobserved space never hallucinates geometry.
Vertices are welded by the lattice edge they sit on (not by float
position), which makes meshes of closed, fully observed surfaces exactly
watertight. Vertex positions and colors are linearly interpolated to the
zero crossing.

``extract_points`` emits one point per sign-changing lattice edge instead
of triangles; it feeds the clustering stage and cross-checks the mesher.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geometry import PointCloud
from .grid import VoxelBlockGrid
from .mc_tables import CORNER_OFFSETS, EDGE_TABLE, TRI_TABLE

DEFAULT_WEIGHT_MIN = 1.0

# canonical (voxel offset within the cell, axis) for each of the 12 edges;
# both cells sharing an edge derive the same key, which is what welds them
_EDGE_CANONICAL = (
    ((0, 0, 0), 0), ((1, 0, 0), 1), ((0, 1, 0), 0), ((0, 0, 0), 1),
    ((0, 0, 1), 0), ((1, 0, 1), 1), ((0, 1, 1), 0), ((0, 0, 1), 1),
    ((0, 0, 0), 2), ((1, 0, 0), 2), ((1, 1, 0), 2), ((0, 1, 0), 2),
)

_EDGE_TABLE_NP = np.asarray(EDGE_TABLE, dtype=np.int32)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle indices out of range")
            degenerate = (
                (self.triangles[:, 0] == self.triangles[:, 1])
                | (self.triangles[:, 1] == self.triangles[:, 2])
                | (self.triangles[:, 0] == self.triangles[:, 2])
            )
            if degenerate.any():
                raise ValueError("mesh contains degenerate triangles")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("colors length must match vertices")

    def __len__(self):
        return len(self.triangles)

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


def dense_embed(grid: VoxelBlockGrid):
    """Scatter all blocks into dense arrays over their bounding box.

    Returns (origin_voxel, tsdf, weight, color); indices are voxel
    coordinates relative to origin_voxel.
    """
    e = grid.block_edge
    if grid.count == 0:
        z = np.zeros((0, 0, 0), dtype=np.float32)
        return np.zeros(3, dtype=np.int64), z, z, np.zeros((0, 0, 0, 3), dtype=np.float32)
    blocks = grid.block_coords.astype(np.int64)
    bmin = blocks.min(axis=0)
    dims = (blocks.max(axis=0) - bmin + 1) * e
    tsdf = np.zeros(dims, dtype=np.float32)
    weight = np.zeros(dims, dtype=np.float32)
    color = np.zeros((*dims, 3), dtype=np.float32)
    for slot in range(grid.count):
        ox, oy, oz = (blocks[slot] - bmin) * e
        tsdf[ox:ox + e, oy:oy + e, oz:oz + e] = grid.tsdf[slot]
        weight[ox:ox + e, oy:oy + e, oz:oz + e] = grid.weight[slot]
        color[ox:ox + e, oy:oy + e, oz:oz + e] = grid.color[slot]
    return bmin * e, tsdf, weight, color


def _corner_views(arr: np.ndarray):
    """The 8 (X-1, Y-1, Z-1) shifted views of a dense array, corner order."""
    return [
        arr[dx:arr.shape[0] - 1 + dx, dy:arr.shape[1] - 1 + dy, dz:arr.shape[2] - 1 + dz]
        for dx, dy, dz in CORNER_OFFSETS
    ]


def extract_mesh(grid: VoxelBlockGrid, weight_min: float = DEFAULT_WEIGHT_MIN) -> TriangleMesh:
    """Marching cubes over the zero level set of sufficiently observed voxels."""
    origin, tsdf, weight, color = dense_embed(grid)
    if tsdf.size == 0 or min(tsdf.shape) < 2:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    valid = weight >= weight_min
    inside = tsdf < 0.0
    all_valid = np.ones(tuple(s - 1 for s in tsdf.shape), dtype=bool)
    case = np.zeros(all_valid.shape, dtype=np.int32)
    for bit, v in enumerate(_corner_views(inside)):
        case |= v.astype(np.int32) << bit
    for v in _corner_views(valid):
        all_valid &= v
    active = all_valid & (_EDGE_TABLE_NP[case] != 0)
    cx, cy, cz = np.nonzero(active)
    if len(cx) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cases = case[cx, cy, cz]
    cells = np.stack([cx, cy, cz], axis=1).astype(np.int64)

    ny, nz = tsdf.shape[1], tsdf.shape[2]

    def edge_key(cell_subset, edge):
        (ox, oy, oz), axis = _EDGE_CANONICAL[edge]
        vx = cell_subset[:, 0] + ox
        vy = cell_subset[:, 1] + oy
        vz = cell_subset[:, 2] + oz
        return ((vx * ny + vy) * nz + vz) * 3 + axis

    # one interpolated vertex per used (cell, edge), then welded by key
    key_parts, pos_parts, col_parts = [], [], []
    edge_bits = _EDGE_TABLE_NP[cases]
    axis_unit = np.eye(3, dtype=np.int64)
    for edge in range(12):
        used = (edge_bits >> edge) & 1 == 1
        if not used.any():
            continue
        sub = cells[used]
        (ox, oy, oz), axis = _EDGE_CANONICAL[edge]
        ax = sub[:, 0] + ox
        ay = sub[:, 1] + oy
        az = sub[:, 2] + oz
        bx, by, bz = (np.array([ax, ay, az]) + axis_unit[axis][:, None])
        va = tsdf[ax, ay, az].astype(np.float64)
        vb = tsdf[bx, by, bz].astype(np.float64)
        t = va / (va - vb)
        pos = np.stack([ax, ay, az], axis=1).astype(np.float64)
        pos[:, axis] += t
        ca = color[ax, ay, az].astype(np.float64)
        cb = color[bx, by, bz].astype(np.float64)
        key_parts.append(edge_key(sub, edge))
        pos_parts.append(pos)
        col_parts.append(ca + t[:, None] * (cb - ca))

    keys = np.concatenate(key_parts)
    positions = np.concatenate(pos_parts)
    colors = np.concatenate(col_parts)
    unique_keys, first = np.unique(keys, return_index=True)
    vertices = (origin + positions[first] + 0.5) * grid.voxel_size
    vertex_colors = np.clip(colors[first], 0.0, 1.0)

    # triangles, grouped by cube case so the table lookup vectorizes
    tri_rows = []
    for c in np.unique(cases):
        table = TRI_TABLE[c]
        if not table:
            continue
        sub = cells[cases == c]
        for k in range(0, len(table), 3):
            e0, e1, e2 = table[k], table[k + 1], table[k + 2]
            k0 = np.searchsorted(unique_keys, edge_key(sub, e0))
            k1 = np.searchsorted(unique_keys, edge_key(sub, e1))
            k2 = np.searchsorted(unique_keys, edge_key(sub, e2))
            # table winding assumes inside < 0 with normals into the surface;
            # flip so normals point toward positive (observed free) space
            tri_rows.append(np.stack([k0, k2, k1], axis=1))
    triangles = np.concatenate(tri_rows) if tri_rows else np.zeros((0, 3), dtype=np.int64)
    return TriangleMesh(vertices=vertices, triangles=triangles, colors=vertex_colors)


def extract_points(grid: VoxelBlockGrid, weight_min: float = DEFAULT_WEIGHT_MIN) -> PointCloud:
    """One point per zero-crossing lattice edge, at the interpolated crossing."""
    origin, tsdf, weight, color = dense_embed(grid)
    if tsdf.size == 0:
        return PointCloud(points=np.zeros((0, 3)))
    valid = weight >= weight_min
    points, colors = [], []
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, tsdf.shape[axis] - 1)
        sl_b[axis] = slice(1, tsdf.shape[axis])
        a, b = tsdf[tuple(sl_a)], tsdf[tuple(sl_b)]
        ok = valid[tuple(sl_a)] & valid[tuple(sl_b)] & ((a < 0) != (b < 0))
        if not ok.any():
            continue
        ix, iy, iz = np.nonzero(ok)
        va = a[ix, iy, iz].astype(np.float64)
        vb = b[ix, iy, iz].astype(np.float64)
        t = va / (va - vb)
        pos = np.stack([ix, iy, iz], axis=1).astype(np.float64)
        pos[:, axis] += t
        points.append((origin + pos + 0.5) * grid.voxel_size)
        ca = color[ix, iy, iz]
        j = [ix, iy, iz]
        j[axis] = j[axis] + 1
        cb = color[j[0], j[1], j[2]]
        colors.append(np.clip(ca + t[:, None] * (cb - ca), 0.0, 1.0))
    if not points:
        return PointCloud(points=np.zeros((0, 3)))
    return PointCloud(points=np.concatenate(points), colors=np.concatenate(colors))


# --- mesh export ---

def save_mesh_ply(mesh: TriangleMesh, path) -> None:
    n, m = len(mesh.vertices), len(mesh.triangles)
    if mesh.colors is not None:
        colors = np.clip(mesh.colors * 255.0 + 0.5, 0, 255).astype(np.uint8)
    else:
        colors = np.full((n, 3), 200, dtype=np.uint8)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {m}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    vert = np.empty(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    vert["xyz"] = mesh.vertices.astype(np.float32)
    vert["rgb"] = colors
    face = np.empty(m, dtype=[("count", "u1"), ("idx", "<i4", 3)])
    face["count"] = 3
    face["idx"] = mesh.triangles.astype(np.int32)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vert.tobytes())
        f.write(face.tobytes())


def save_mesh_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
