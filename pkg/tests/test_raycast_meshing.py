import itertools

import numpy as np
import pytest

from segfuse.fusion import (
    TriangleMesh,
    VoxelBlockGrid,
    extract_mesh,
    extract_points,
    integrate,
    raycast,
    save_mesh_obj,
    save_mesh_ply,
)
from segfuse.geometry import Pose
from segfuse import simulator

INTR = simulator.LOUNGE_INTRINSICS


def analytic_sphere_grid(radius=0.5, voxel=0.01, trunc=0.04):
    """Write the exact signed distance of a sphere into a fresh grid."""
    grid = VoxelBlockGrid(voxel_size=voxel, truncation=trunc)
    lim = int(np.ceil((radius + 3 * trunc) / grid.block_size))
    coords = np.array([(x, y, z)
                       for x in range(-lim, lim + 1)
                       for y in range(-lim, lim + 1)
                       for z in range(-lim, lim + 1)])
    slots = grid.slots_for(coords, allocate=True)
    centers = grid.voxel_centers(slots).reshape(len(slots), -1, 3)
    shape = grid.tsdf[0].shape
    for i, slot in enumerate(slots):
        d = np.linalg.norm(centers[i], axis=1) - radius
        grid.tsdf[slot] = np.clip(d / trunc, -1, 1).reshape(shape).astype(np.float32)
        grid.weight[slot] = (np.abs(d) < 2 * trunc).astype(np.float32).reshape(shape)
        grid.color[slot] = 0.4
    dead = [s for s in range(grid.count) if not grid.weight[s].any()]
    grid._remove_slots(dead)
    return grid


def mesh_edge_counts(mesh: TriangleMesh):
    edges = {}
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            edges[key] = edges.get(key, 0) + 1
    return edges


def mesh_area(mesh: TriangleMesh):
    v, t = mesh.vertices, mesh.triangles
    cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1).sum()


class TestRaycast:
    def test_plane_principal_depth(self):
        scene = simulator.Scene(primitives=[
            simulator.ScenePrimitive("plane", Pose.from_rt(np.eye(3), (0, 0, 2.0)),
                                     (2.0, 2.0), (0.5, 0.5, 0.5), "wall", 0)
        ], background_labels=frozenset())
        frame, _, _ = simulator.render(scene, Pose.identity(), INTR)
        grid = VoxelBlockGrid()
        integrate(grid, frame, Pose.identity())
        synth = raycast(grid, Pose.identity(), INTR)
        center = synth.depth[INTR.height // 2, INTR.width // 2]
        assert abs(center - 2.0) < grid.voxel_size / 2
        # frontal wall: normal points back at the camera
        np.testing.assert_allclose(
            synth.normals[INTR.height // 2, INTR.width // 2], [0, 0, -1], atol=0.05)

    def test_empty_grid_all_invalid(self):
        synth = raycast(VoxelBlockGrid(), Pose.identity(), INTR)
        assert not synth.valid_mask().any()

    def test_sphere_depth_matches_simulator(self):
        scene = simulator.sphere_scene()
        grid = VoxelBlockGrid()
        poses = list(itertools.chain(simulator.orbit((0, 0, 0), 1.5, 10),
                                     simulator.orbit((0, 0, 0), 1.5, 10, axis=(1, 0, 0))))
        for t, pose in enumerate(poses):
            frame, _, _ = simulator.render(scene, pose, INTR, timestamp=t)
            integrate(grid, frame, pose)
        pose = poses[0]
        reference, _, _ = simulator.render(scene, pose, INTR)
        synth = raycast(grid, pose, INTR)
        both = synth.valid_mask() & (reference.depth > 0)
        assert both.sum() > 1000
        err = np.abs(synth.depth[both] - reference.depth_meters()[both])
        assert np.median(err) < grid.voxel_size

    def test_normals_are_camera_frame(self):
        # tilted camera viewing the floor: camera-frame normals must match
        # the world normal rotated by the camera rotation
        scene = simulator.Scene(primitives=[
            simulator.ScenePrimitive("plane",
                                     Pose.from_rt(np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]],
                                                           dtype=float), (0.0, 1.0, 0.0)),
                                     (3.0, 3.0), (0.5, 0.5, 0.5), "floor", 0)
        ], background_labels=frozenset())
        pose = simulator.look_at((0.0, -0.5, -1.5), (0.0, 1.0, 0.5))
        frame, _, _ = simulator.render(scene, pose, INTR)
        grid = VoxelBlockGrid()
        integrate(grid, frame, pose)
        synth = raycast(grid, pose, INTR)
        expected = pose.rotation.T @ np.array([0.0, -1.0, 0.0])  # floor normal is up
        valid = synth.valid_mask() & (np.linalg.norm(synth.normals, axis=-1) > 0.5)
        dots = synth.normals[valid] @ expected
        assert np.median(dots) > 0.99


class TestMarchingCubes:
    def test_empty_grid_empty_mesh(self):
        mesh = extract_mesh(VoxelBlockGrid())
        assert len(mesh.vertices) == 0 and len(mesh.triangles) == 0

    def test_analytic_sphere_watertight(self):
        grid = analytic_sphere_grid()
        mesh = extract_mesh(grid)
        edges = mesh_edge_counts(mesh)
        assert set(edges.values()) == {2}
        euler = len(mesh.vertices) - len(edges) + len(mesh.triangles)
        assert euler == 2
        area = mesh_area(mesh)
        assert abs(area - 4 * np.pi * 0.25) / (4 * np.pi * 0.25) < 0.05
        dist = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5)
        assert dist.mean() < grid.voxel_size

    def test_sphere_normals_point_outward(self):
        mesh = extract_mesh(analytic_sphere_grid())
        v, t = mesh.vertices, mesh.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        centroids = v[t].mean(axis=1)
        radial = centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
        assert np.einsum("ij,ij->i", n, radial).min() > 0.9

    def test_plane_patch_normals(self):
        # fully observed frontal wall patch: every triangle normal is the
        # plane normal to within 2 degrees
        grid = VoxelBlockGrid()
        integrate(grid, _wall_frame(), Pose.identity())
        mesh = extract_mesh(grid)
        assert len(mesh.triangles) > 100
        v, t = mesh.vertices, mesh.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        angles = np.degrees(np.arccos(np.clip(np.abs(n[:, 2]), -1, 1)))
        assert angles.max() < 2.0

    def test_vertex_colors_interpolated(self):
        mesh = extract_mesh(analytic_sphere_grid())
        assert mesh.colors is not None
        np.testing.assert_allclose(mesh.colors, 0.4, atol=1e-5)

    def test_degenerate_triangles_rejected_by_type(self):
        with pytest.raises(ValueError):
            TriangleMesh(vertices=np.zeros((3, 3)), triangles=[[0, 1, 1]])


def _wall_frame(z=2.005):
    import numpy as np
    from segfuse.geometry import RGBDFrame
    depth = np.full((INTR.height, INTR.width), round(z / INTR.depth_scale), dtype=np.uint16)
    rgb = np.full((INTR.height, INTR.width, 3), 90, dtype=np.uint8)
    return RGBDFrame(rgb=rgb, depth=depth, intrinsics=INTR, timestamp=0)


class TestExtractPoints:
    def test_empty(self):
        assert len(extract_points(VoxelBlockGrid())) == 0

    def test_sphere_points_on_surface(self):
        grid = analytic_sphere_grid()
        cloud = extract_points(grid)
        dist = np.abs(np.linalg.norm(cloud.points, axis=1) - 0.5)
        assert dist.max() < grid.voxel_size

    def test_count_tracks_mesh_vertices(self):
        grid = analytic_sphere_grid()
        mesh = extract_mesh(grid)
        cloud = extract_points(grid)
        ratio = len(cloud) / len(mesh.vertices)
        assert 0.7 <= ratio <= 1.3


class TestMeshExport:
    def test_ply_and_obj_written(self, tmp_path):
        mesh = extract_mesh(analytic_sphere_grid())
        ply = tmp_path / "m.ply"
        obj = tmp_path / "m.obj"
        save_mesh_ply(mesh, ply)
        save_mesh_obj(mesh, obj)
        header = ply.read_bytes()[:200].decode("ascii", "replace")
        assert f"element vertex {len(mesh.vertices)}" in header
        assert f"element face {len(mesh.triangles)}" in header
        lines = obj.read_text().splitlines()
        assert sum(1 for l in lines if l.startswith("v ")) == len(mesh.vertices)
        assert sum(1 for l in lines if l.startswith("f ")) == len(mesh.triangles)
