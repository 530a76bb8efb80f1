"""Volumetric ray casting: synthesize a frame from the TSDF model.

Each pixel's ray marches through block space, stepping fast through
unallocated blocks (jump to the block exit) and distance-stepping inside
observed ones using the truncated distance itself. A sign change between
consecutive valid samples brackets the surface; secant refinement on the
trilinear field gives sub-voxel depth. Normals come from central
differences of the field at the hit point.

The inner loop is JIT-compiled with numba; compilation happens on the
first call in a process, which is part of model initialization cost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit, prange

from ..geometry import Intrinsics, Pose
from .grid import VoxelBlockGrid


@dataclass
class SynthesizedFrame:
    """Model-rendered depth/color/normals, all in the render camera frame.

    depth is metric float32 with 0 for misses; normals are unit vectors in
    camera coordinates (zero where unavailable).
    """

    depth: np.ndarray
    color: np.ndarray
    normals: np.ndarray
    pose: Pose
    intrinsics: Intrinsics

    def valid_mask(self) -> np.ndarray:
        return self.depth > 0


@njit(cache=False, inline="always")
def _sample(p, origin_block, block_index, tsdf, weight, edge, voxel_size):
    """Trilinear TSDF at world point p; returns (value, ok)."""
    qx = p[0] / voxel_size - 0.5
    qy = p[1] / voxel_size - 0.5
    qz = p[2] / voxel_size - 0.5
    bx = int(np.floor(qx))
    by = int(np.floor(qy))
    bz = int(np.floor(qz))
    fx = qx - bx
    fy = qy - by
    fz = qz - bz
    value = 0.0
    for c in range(8):
        dx = c & 1
        dy = (c >> 1) & 1
        dz = (c >> 2) & 1
        vx = bx + dx
        vy = by + dy
        vz = bz + dz
        gx = vx // edge - origin_block[0]
        gy = vy // edge - origin_block[1]
        gz = vz // edge - origin_block[2]
        if (gx < 0 or gy < 0 or gz < 0 or gx >= block_index.shape[0]
                or gy >= block_index.shape[1] or gz >= block_index.shape[2]):
            return 0.0, False
        slot = block_index[gx, gy, gz]
        if slot < 0:
            return 0.0, False
        lx = vx - (vx // edge) * edge
        ly = vy - (vy // edge) * edge
        lz = vz - (vz // edge) * edge
        if weight[slot, lx, ly, lz] <= 0.0:
            return 0.0, False
        wx = fx if dx == 1 else 1.0 - fx
        wy = fy if dy == 1 else 1.0 - fy
        wz = fz if dz == 1 else 1.0 - fz
        value += wx * wy * wz * tsdf[slot, lx, ly, lz]
    return value, True


@njit(cache=False, inline="always")
def _sample_color(p, origin_block, block_index, weight, color, edge, voxel_size, out):
    qx = p[0] / voxel_size - 0.5
    qy = p[1] / voxel_size - 0.5
    qz = p[2] / voxel_size - 0.5
    bx = int(np.floor(qx))
    by = int(np.floor(qy))
    bz = int(np.floor(qz))
    fx = qx - bx
    fy = qy - by
    fz = qz - bz
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    total = 0.0
    for c in range(8):
        dx = c & 1
        dy = (c >> 1) & 1
        dz = (c >> 2) & 1
        vx = bx + dx
        vy = by + dy
        vz = bz + dz
        gx = vx // edge - origin_block[0]
        gy = vy // edge - origin_block[1]
        gz = vz // edge - origin_block[2]
        if (gx < 0 or gy < 0 or gz < 0 or gx >= block_index.shape[0]
                or gy >= block_index.shape[1] or gz >= block_index.shape[2]):
            continue
        slot = block_index[gx, gy, gz]
        if slot < 0:
            continue
        lx = vx - (vx // edge) * edge
        ly = vy - (vy // edge) * edge
        lz = vz - (vz // edge) * edge
        if weight[slot, lx, ly, lz] <= 0.0:
            continue
        wx = fx if dx == 1 else 1.0 - fx
        wy = fy if dy == 1 else 1.0 - fy
        wz = fz if dz == 1 else 1.0 - fz
        w = wx * wy * wz
        total += w
        out[0] += w * color[slot, lx, ly, lz, 0]
        out[1] += w * color[slot, lx, ly, lz, 1]
        out[2] += w * color[slot, lx, ly, lz, 2]
    if total > 1e-9:
        out[0] /= total
        out[1] /= total
        out[2] /= total


@njit(cache=False, parallel=True)
def _raycast_kernel(
    origin_block, block_index, tsdf, weight, color, edge, voxel_size, truncation,
    r_wc, t_wc, fx, fy, cx, cy, height, width,
    t_near, t_far, aabb_lo, aabb_hi,
    out_depth, out_color, out_normal,
):
    block_size = voxel_size * edge
    for v in prange(height):
        p = np.empty(3)
        q = np.empty(3)
        rgb = np.empty(3)
        for u in range(width):
            dx_c = (u - cx) / fx
            dy_c = (v - cy) / fy
            # world-space ray; parameter t equals camera-space z
            dx = r_wc[0, 0] * dx_c + r_wc[0, 1] * dy_c + r_wc[0, 2]
            dy = r_wc[1, 0] * dx_c + r_wc[1, 1] * dy_c + r_wc[1, 2]
            dz = r_wc[2, 0] * dx_c + r_wc[2, 1] * dy_c + r_wc[2, 2]

            # clip the march to the grid's bounding box
            t0 = t_near
            t1 = t_far
            ok = True
            for k in range(3):
                d_k = dx if k == 0 else (dy if k == 1 else dz)
                o_k = t_wc[k]
                if abs(d_k) < 1e-12:
                    if o_k < aabb_lo[k] or o_k > aabb_hi[k]:
                        ok = False
                        break
                else:
                    ta = (aabb_lo[k] - o_k) / d_k
                    tb = (aabb_hi[k] - o_k) / d_k
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
            if not ok or t1 <= t0:
                continue

            t = t0
            prev_t = -1.0
            prev_f = 0.0
            hit_t = -1.0
            while t <= t1:
                p[0] = t_wc[0] + t * dx
                p[1] = t_wc[1] + t * dy
                p[2] = t_wc[2] + t * dz
                f, valid = _sample(p, origin_block, block_index, tsdf, weight,
                                   edge, voxel_size)
                if not valid:
                    prev_t = -1.0
                    gx = int(np.floor(p[0] / block_size)) - origin_block[0]
                    gy = int(np.floor(p[1] / block_size)) - origin_block[1]
                    gz = int(np.floor(p[2] / block_size)) - origin_block[2]
                    allocated = (
                        0 <= gx < block_index.shape[0]
                        and 0 <= gy < block_index.shape[1]
                        and 0 <= gz < block_index.shape[2]
                        and block_index[gx, gy, gz] >= 0
                    )
                    if allocated:
                        # sparse voxels inside an observed block: crawl
                        t += 0.5 * voxel_size
                    else:
                        # empty block: jump to its exit face
                        step = t1 - t
                        for k in range(3):
                            d_k = dx if k == 0 else (dy if k == 1 else dz)
                            if abs(d_k) < 1e-12:
                                continue
                            cell = np.floor(p[k] / block_size)
                            bound = (cell + (1.0 if d_k > 0 else 0.0)) * block_size
                            tk = (bound - p[k]) / d_k
                            if tk < step:
                                step = tk
                        t += max(step, 0.5 * voxel_size) + 0.25 * voxel_size
                    continue
                if prev_t >= 0.0 and prev_f > 0.0 and f <= 0.0:
                    # bracketed: secant refinement on the trilinear field
                    ta = prev_t
                    tb = t
                    fa = prev_f
                    fb = f
                    hit_t = tb
                    for _ in range(6):
                        if fa == fb:
                            break
                        tm = ta + fa * (tb - ta) / (fa - fb)
                        p[0] = t_wc[0] + tm * dx
                        p[1] = t_wc[1] + tm * dy
                        p[2] = t_wc[2] + tm * dz
                        fm, okm = _sample(p, origin_block, block_index, tsdf,
                                          weight, edge, voxel_size)
                        if not okm:
                            break
                        hit_t = tm
                        if fm > 0.0:
                            ta = tm
                            fa = fm
                        else:
                            tb = tm
                            fb = fm
                    break
                prev_t = t
                prev_f = f
                # distance stepping: |f| * truncation approximates clearance
                step = abs(f) * truncation * 0.75
                if step < 0.5 * voxel_size:
                    step = 0.5 * voxel_size
                if step > 0.75 * truncation:
                    step = 0.75 * truncation
                t += step

            if hit_t <= 0.0:
                continue
            out_depth[v, u] = hit_t
            p[0] = t_wc[0] + hit_t * dx
            p[1] = t_wc[1] + hit_t * dy
            p[2] = t_wc[2] + hit_t * dz
            _sample_color(p, origin_block, block_index, weight, color, edge,
                          voxel_size, rgb)
            out_color[v, u, 0] = rgb[0]
            out_color[v, u, 1] = rgb[1]
            out_color[v, u, 2] = rgb[2]
            # central-difference gradient of the field = outward normal
            gx_ok = True
            g = np.empty(3)
            for k in range(3):
                q[0] = p[0]
                q[1] = p[1]
                q[2] = p[2]
                q[k] = p[k] + voxel_size
                f1, ok1 = _sample(q, origin_block, block_index, tsdf, weight,
                                  edge, voxel_size)
                q[k] = p[k] - voxel_size
                f2, ok2 = _sample(q, origin_block, block_index, tsdf, weight,
                                  edge, voxel_size)
                if not (ok1 and ok2):
                    gx_ok = False
                    break
                g[k] = f1 - f2
            if gx_ok:
                norm = np.sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2])
                if norm > 1e-12:
                    # gradient is in world axes; rotate into the camera frame
                    out_normal[v, u, 0] = (r_wc[0, 0] * g[0] + r_wc[1, 0] * g[1]
                                           + r_wc[2, 0] * g[2]) / norm
                    out_normal[v, u, 1] = (r_wc[0, 1] * g[0] + r_wc[1, 1] * g[1]
                                           + r_wc[2, 1] * g[2]) / norm
                    out_normal[v, u, 2] = (r_wc[0, 2] * g[0] + r_wc[1, 2] * g[1]
                                           + r_wc[2, 2] * g[2]) / norm


class RaycastContext:
    """Reusable dense block index built from a grid snapshot."""

    def __init__(self, grid: VoxelBlockGrid):
        self.grid = grid
        if grid.count == 0:
            self.empty = True
            return
        self.empty = False
        blocks = grid.block_coords.astype(np.int64)
        bmin = blocks.min(axis=0)
        bmax = blocks.max(axis=0)
        dims = bmax - bmin + 1
        index = np.full(tuple(dims), -1, dtype=np.int32)
        rel = blocks - bmin
        index[rel[:, 0], rel[:, 1], rel[:, 2]] = np.arange(grid.count, dtype=np.int32)
        self.origin_block = bmin
        self.block_index = index
        self.aabb_lo = bmin.astype(np.float64) * grid.block_size
        self.aabb_hi = (bmax + 1).astype(np.float64) * grid.block_size


def raycast(
    grid: VoxelBlockGrid,
    pose: Pose,
    intrinsics: Intrinsics,
    t_near: float = 0.05,
    t_far: float = 10.0,
    context: Optional[RaycastContext] = None,
) -> SynthesizedFrame:
    """Render the model as seen from ``pose``; misses are invalid pixels."""
    h, w = intrinsics.height, intrinsics.width
    depth = np.zeros((h, w), dtype=np.float64)
    color = np.zeros((h, w, 3), dtype=np.float64)
    normals = np.zeros((h, w, 3), dtype=np.float64)
    ctx = context if context is not None and context.grid is grid else RaycastContext(grid)
    if not ctx.empty:
        _raycast_kernel(
            ctx.origin_block,
            ctx.block_index,
            grid.tsdf[: grid.count],
            grid.weight[: grid.count],
            grid.color[: grid.count],
            grid.block_edge,
            grid.voxel_size,
            grid.truncation,
            np.ascontiguousarray(pose.rotation),
            np.ascontiguousarray(pose.translation),
            intrinsics.fx,
            intrinsics.fy,
            intrinsics.cx,
            intrinsics.cy,
            h,
            w,
            t_near,
            t_far,
            ctx.aabb_lo,
            ctx.aabb_hi,
            depth,
            color,
            normals,
        )
    return SynthesizedFrame(
        depth=depth.astype(np.float32),
        color=color.astype(np.float32),
        normals=normals.astype(np.float32),
        pose=pose,
        intrinsics=intrinsics,
    )
