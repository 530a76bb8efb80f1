"""Acceptance suite: one test per release criterion.

Each test pins the tolerance it must meet; the conftest summary hook
prints one PASS/FAIL line per criterion at the end of the session. The
lounge end-to-end run (criteria 6 and 10) executes the real CLI in fresh
subprocesses over loopback TCP and is shared between both tests.
"""

import itertools
import json
import math
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from segfuse import container, simulator, transport
from segfuse.clustering import SplitParams, dbscan, ransac_plane, split_instances
from segfuse.fusion import (
    FusionConfig,
    VoxelBlockGrid,
    extract_mesh,
    fuse_stream,
    integrate,
    point_to_plane_system,
    twist_to_pose,
)
from segfuse.fusion.stream import _group_by_timestamp, _merge_crops
from segfuse.geometry import Intrinsics, PointCloud, Pose, compose, inverse
from segfuse.metrics import read_frame_log
from segfuse.sampler import MODE_IMAGE, SamplerConfig, SamplerState, should_keep
from segfuse.segmentation import Detection, ObjectCrop, apply_masks, suppress_masks

from test_clustering import dbscan_oracle, same_partition
from test_raycast_meshing import mesh_area, mesh_edge_counts
from test_sampler import _oracle_image

INTR = simulator.LOUNGE_INTRINSICS
VOXEL = 0.01


# --- criterion 1: mask suppression reproduces the published count fix ---

def test_criterion_01_suppression_count_correction():
    start = time.monotonic()
    h, w = 120, 160

    def rect(x0, y0, dx, dy):
        m = np.zeros((h, w), dtype=bool)
        m[y0:y0 + dy, x0:x0 + dx] = True
        return m

    chair_mask = rect(100, 20, 24, 30)
    couch_duplicate = rect(101, 21, 22, 28)  # same object, slightly smaller
    dets = [
        Detection("couch", 0.27, rect(0, 0, 20, 16)),
        Detection("person", 0.28, rect(30, 0, 16, 24)),
        Detection("person", 0.33, rect(60, 0, 16, 24)),
        Detection("couch", 0.33, couch_duplicate),
        Detection("chair", 0.40, rect(0, 60, 20, 20)),
        Detection("chair", 0.55, rect(40, 60, 20, 20)),
        Detection("chair", 0.58, chair_mask),
    ]
    from segfuse.segmentation import mask_iou
    assert mask_iou(chair_mask, couch_duplicate) > 0.45

    survivors = suppress_masks(dets, iou_threshold=0.45, score_floor=0.0)
    assert len(survivors) == 6, "seven detections must resolve to six objects"
    at_duplicate = [d for d in survivors if mask_iou(d.mask, chair_mask) > 0.45]
    assert len(at_duplicate) == 1 and at_duplicate[0].label == "chair"
    assert at_duplicate[0].confidence == 0.58
    assert time.monotonic() - start < 1.0


# --- criterion 2: sphere reconstruction fidelity ---

def test_criterion_02_sphere_reconstruction():
    start = time.monotonic()
    radius = 0.5
    scene = simulator.sphere_scene(radius=radius)
    views = itertools.chain(
        simulator.orbit((0, 0, 0), 1.5, 10, axis=(0, 1, 0)),
        simulator.orbit((0, 0, 0), 1.5, 10, axis=(1, 0, 0)),
    )
    grid = VoxelBlockGrid(voxel_size=VOXEL)
    for t, pose in enumerate(views):
        frame, _, _ = simulator.render(scene, pose, INTR, timestamp=t)
        integrate(grid, frame, pose)
    mesh = extract_mesh(grid)

    edges = mesh_edge_counts(mesh)
    assert set(edges.values()) == {2}, "every edge must belong to exactly two triangles"
    euler = len(mesh.vertices) - len(edges) + len(mesh.triangles)
    assert euler == 2
    dist = np.abs(np.linalg.norm(mesh.vertices, axis=1) - radius)
    assert dist.mean() < VOXEL
    area = mesh_area(mesh)
    expected = 4 * math.pi * radius ** 2
    assert abs(area - expected) / expected < 0.05
    assert time.monotonic() - start < 30.0


# --- criterion 3: frame-to-model tracking accuracy ---

def _orbit_crops(noise):
    scene = simulator.box_scene()
    radius = 1.5
    traj = simulator.orbit((0, 0.55, 0), radius, 60, height=-0.9, sweep=0.6 / radius)
    step = np.linalg.norm(traj.poses[1].translation - traj.poses[0].translation)
    assert 0.009 <= step <= 0.011, "fixture must move ~1 cm per step"
    crops = []
    for t, pose in enumerate(traj):
        frame, dets, _ = simulator.render(scene, pose, INTR, noise, timestamp=t)
        crops.extend(apply_masks(frame, suppress_masks(dets, score_floor=0.0)))
    return crops, traj


def _trajectory_errors(report, traj):
    p0 = traj.poses[0]
    ate, steps = [], []
    prev_est = prev_gt = None
    for rec in report.records:
        if rec.pose is None:
            continue
        gt_model = compose(inverse(p0), traj.poses[rec.timestamp])
        ate.append(np.linalg.norm(rec.pose.translation - gt_model.translation))
        if prev_est is not None:
            rel_est = rec.pose.translation - prev_est.translation
            rel_gt = gt_model.translation - prev_gt.translation
            steps.append(np.linalg.norm(rel_est - rel_gt))
        prev_est, prev_gt = rec.pose, gt_model
    return np.asarray(ate), np.asarray(steps)


def test_criterion_03_tracking_accuracy():
    start = time.monotonic()
    # small-object scanning runs the model at a finer voxel pitch; the
    # criterion's bounds are absolute (2 cm / 1 mm / 4 cm), not voxel-tied
    cfg = FusionConfig(voxel_size=0.0075, truncation=0.03, use_pose_hints=False)

    crops, traj = _orbit_crops(noise=None)
    _, report = fuse_stream(iter(crops), cfg)
    assert report.lost_count == 0
    ate, steps = _trajectory_errors(report, traj)
    assert np.sqrt(np.mean(ate ** 2)) < 0.02, "noiseless ATE RMSE must stay under 2 cm"
    assert steps.max() < 0.001, "per-step translation error must stay under 1 mm"

    noisy_crops, traj = _orbit_crops(simulator.NoiseModel(k=0.005, seed=11))
    _, noisy_report = fuse_stream(iter(noisy_crops), cfg)
    noisy_ate, _ = _trajectory_errors(noisy_report, traj)
    assert np.sqrt(np.mean(noisy_ate ** 2)) < 0.04, "noisy ATE RMSE must stay under 4 cm"
    assert time.monotonic() - start < 60.0


# --- criterion 4: point-to-plane jacobian vs central differences ---

def test_criterion_04_jacobian_correctness():
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    n = 1000
    points = rng.uniform(-1.0, 1.0, (n, 3)) + (0.0, 0.0, 2.5)
    targets = points + rng.normal(0.0, 0.02, (n, 3))
    normals = rng.standard_normal((n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    _, jac = point_to_plane_system(points, targets, normals)
    eps = 1e-6
    worst = 0.0
    for k in range(6):
        d = np.zeros(6)
        d[k] = eps
        plus = twist_to_pose(d).matrix
        minus = twist_to_pose(-d).matrix
        rp = np.einsum("ij,ij->i", points @ plus[:3, :3].T + plus[:3, 3] - targets, normals)
        rm = np.einsum("ij,ij->i", points @ minus[:3, :3].T + minus[:3, 3] - targets, normals)
        fd = (rp - rm) / (2 * eps)
        worst = max(worst, np.max(np.abs(jac[:, k] - fd) / (np.abs(fd) + 1e-6)))
    assert worst < 1e-4
    assert time.monotonic() - start < 5.0


# --- criterion 5: clustering oracle equivalence ---

def test_criterion_05_clustering_oracles():
    start = time.monotonic()
    rng = np.random.default_rng(99)
    for trial in range(50):
        pts = rng.uniform(0, 1, (200, 3)) * (1.0, 1.0, 0.4)
        mine = dbscan(PointCloud(points=pts), eps=0.09, min_points=4)
        want, n_comp = dbscan_oracle(pts, 0.09, 4)
        assert mine.count == n_comp, f"trial {trial}: cluster count mismatch"
        assert same_partition(mine.labels, want), f"trial {trial}: partition mismatch"

    true_normal = np.array([0.2, -0.3, 0.933])
    true_normal /= np.linalg.norm(true_normal)
    basis = np.linalg.svd(true_normal.reshape(1, 3))[2][1:]
    inlier_pts = rng.uniform(-1, 1, (800, 2)) @ basis + rng.normal(0, 0.002, (800, 1)) * true_normal
    outliers = rng.uniform(-1.5, 1.5, (200, 3))
    cloud = PointCloud(points=np.vstack([inlier_pts, outliers]))
    model = ransac_plane(cloud, dist_threshold=0.01, iterations=600, seed=5)
    angle = math.degrees(math.acos(min(1.0, abs(float(model.normal @ true_normal)))))
    assert angle < 1.0
    recall = np.isin(np.arange(800), model.inliers).mean()
    assert recall >= 0.99
    assert time.monotonic() - start < 10.0


# --- criteria 6 and 10: the lounge fixture over loopback, via the CLI ---

LOUNGE_OVERRIDES = [
    "sampler.enabled=false",
    "clustering.eps=0.05",
    "clustering.min_cluster_points=150",
    "export.save_obj=false",
    # model initialization (first integration + kernel warm-up) stalls the
    # ack-gated stream well beyond the 10 s default
    "transport.ack_timeout=60",
]


@pytest.fixture(scope="module")
def lounge_e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("lounge_e2e")
    dataset = simulator.generate_dataset(
        simulator.lounge_scene(), simulator.lounge_trajectory(60), root / "ds", INTR)

    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()

    out = root / "out"
    overrides = [x for pair in (("--set", o) for o in LOUNGE_OVERRIDES) for x in pair]
    server = subprocess.Popen(
        [sys.executable, "-m", "segfuse.cli", "server",
         "--listen", f"127.0.0.1:{port}", "--out", str(out)] + overrides,
        stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        time.sleep(1.0)  # listener bind
        client = subprocess.run(
            [sys.executable, "-m", "segfuse.cli", "client",
             "--connect", f"127.0.0.1:{port}", "--dataset", str(dataset),
             "--metrics", str(root / "client_metrics.json")] + overrides,
            capture_output=True, timeout=300)
        assert client.returncode == 0, client.stderr.decode()[-2000:]
        server_rc = server.wait(timeout=300)
        assert server_rc == 0, server.stderr.read().decode()[-2000:]
    finally:
        if server.poll() is None:
            server.kill()
    return {"dataset": dataset, "out": out, "root": root}


def _instance_world_centroids(out_dir, label, metrics):
    first_pose = np.asarray(metrics["categories"][label]["first_pose_hint"])
    centroids = []
    for path in sorted(out_dir.glob(f"{label}_instance_*.ply")):
        data = path.read_bytes()
        end = data.find(b"end_header\n") + len(b"end_header\n")
        header = data[:end].decode("ascii")
        nv = int(next(l for l in header.splitlines()
                      if l.startswith("element vertex")).split()[-1])
        rec = np.frombuffer(data[end:end + nv * 15],
                            dtype=np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)]))
        model_centroid = rec["xyz"].mean(axis=0)
        centroids.append((first_pose @ np.append(model_centroid, 1.0))[:3])
    return centroids


def _ground_truth_pose_centroids(dataset):
    """Oracle: fuse the same crops at simulator ground-truth poses (no
    tracking, no transport) and split; instance centroids from this model
    are what a perfect pipeline would produce."""
    source = simulator.DatasetSource(dataset)
    streams, poses = {}, {}
    for frame, dets in source:
        poses[frame.timestamp] = frame.pose_hint
        for crop in apply_masks(frame, suppress_masks(dets, 0.45, 0.35)):
            streams.setdefault(crop.label, []).append(crop)
    first_pose = poses[0]
    out = {}
    for label, crops in streams.items():
        grid = VoxelBlockGrid(voxel_size=VOXEL)
        for group in _group_by_timestamp(iter(crops)):
            obs = _merge_crops(group)
            gt_model = compose(inverse(first_pose), poses[obs.frame_timestamp])
            integrate(grid, obs, gt_model)
        instances = split_instances(grid, SplitParams(eps=0.05, min_cluster_points=150,
                                                      max_planes=0))
        out[label] = [
            (first_pose.matrix @ np.append(mesh.centroid(), 1.0))[:3]
            for _, mesh in instances
        ]
    return out


def test_criterion_06_instance_splitting_end_to_end(lounge_e2e):
    start = time.monotonic()
    out = lounge_e2e["out"]
    metrics = json.loads((out / "server_metrics.json").read_text())

    chairs = sorted(out.glob("chair_instance_*.ply"))
    tables = sorted(out.glob("table_instance_*.ply"))
    assert len(chairs) == 3, f"expected exactly 3 chair instances, got {len(chairs)}"
    assert len(tables) == 1, f"expected exactly 1 table instance, got {len(tables)}"

    oracle = _ground_truth_pose_centroids(lounge_e2e["dataset"])
    assert len(oracle["chair"]) == 3 and len(oracle["table"]) == 1
    for label in ("chair", "table"):
        found = _instance_world_centroids(out, label, metrics)
        for truth in oracle[label]:
            best = min(np.linalg.norm(c - truth) for c in found)
            assert best < 2 * VOXEL, (
                f"{label} centroid {best * 100:.2f} cm from the ground-truth-pose oracle"
            )
    # fixture runtime (dataset generation + stream + fusion) is bounded by
    # the module fixture; this assertion covers the verification step
    assert time.monotonic() - start < 120.0


def test_criterion_10_timing_shape(lounge_e2e):
    out = lounge_e2e["out"]
    metrics = json.loads((out / "server_metrics.json").read_text())
    for label, cat in metrics["categories"].items():
        log = read_frame_log(out / f"{label}_frames.jsonl")
        assert len(log) == cat["frames"] and len(log) > 1
        steady = sorted(rec["wall_time_s"] for rec in log[1:])
        median = steady[len(steady) // 2]
        assert cat["init_time_s"] > median, (
            f"{label}: init {cat['init_time_s']:.3f}s must exceed steady median {median:.3f}s"
        )
        assert cat["steady_median_s"] == pytest.approx(median, rel=1e-6)


# --- criterion 7: wire format ---

def test_criterion_07_wire_format(rng):
    start = time.monotonic()
    from test_container import FIXTURES, assert_crops_equal, random_packet_bytes

    pose = Pose.from_rt(np.eye(3), (0.1, 0.2, 0.3))
    for level in range(10):
        crops, data = random_packet_bytes(rng, level, n_crops=4, pose=pose)
        packet = container.unpack(data)
        decoded = packet.crops()
        assert len(decoded) == len(crops)
        by_label = {}
        for crop in crops:
            by_label.setdefault(crop.label, []).append(crop)
        flat = [c for label in by_label for c in by_label[label]]
        for a, b in zip(flat, decoded):
            assert_crops_equal(a, b)
        raw = container.pack(crops, frame_timestamp=7, intrinsics=crops[0].intrinsics,
                             compression_level=0, pose_hint=pose)
        assert len(data) <= len(raw), "stored datasets may never exceed raw length"

    crops, data = random_packet_bytes(rng, 3, n_crops=1)
    for i in range(0, len(data), 7):
        corrupted = bytearray(data)
        corrupted[i] ^= 0x20
        with pytest.raises(container.PacketError):
            container.unpack(bytes(corrupted))

    import hashlib
    manifest = (FIXTURES / "golden.sha256").read_text().split()
    for digest, name in zip(manifest[0::2], manifest[1::2]):
        blob = (FIXTURES / name).read_bytes()
        assert hashlib.sha256(blob).hexdigest() == digest
        container.unpack(blob)  # must stay decodable
    assert time.monotonic() - start < 10.0


# --- criterion 8: transport contract ---

def _tiny_packet(ts):
    rng = np.random.default_rng(ts)
    crop = ObjectCrop(
        label="chair", confidence=1.0,
        rgb=rng.integers(0, 256, (4, 4, 3), dtype=np.uint8).astype(np.uint8),
        depth=rng.integers(1, 1000, (4, 4)).astype(np.uint16),
        bbox_origin=(0, 0), frame_timestamp=ts, intrinsics=INTR)
    return container.pack([crop], frame_timestamp=ts, intrinsics=INTR)


def test_criterion_08_transport_contract():
    import threading

    start = time.monotonic()
    # exactly-once, in-order delivery of 500 packets
    n = 500
    received = []
    with transport.PacketReceiver(port=0, buffer_capacity=8) as server:
        server.serve_in_background()
        consumer = threading.Thread(target=lambda: received.extend(
            p.header.frame_timestamp for p in transport.drain(server.buffer, timeout=30)
        ), daemon=True)
        consumer.start()
        with transport.PacketClient("127.0.0.1", server.port) as client:
            for ts in range(n):
                assert client.send(_tiny_packet(ts)).sequence == ts
            client.send_end()
        consumer.join(timeout=30)
    assert received == list(range(n)), "delivery must be exactly-once, in order"

    # ack gating: a server acking after 100 ms caps the client at 10/s
    delay, m = 0.1, 12
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)

    def slow_acker():
        conn, _ = listener.accept()
        with conn:
            for _ in range(m):
                kind, seq, _ = transport.read_frame(conn)
                time.sleep(delay)
                transport.write_frame(conn, transport.KIND_ACK, seq)

    acker = threading.Thread(target=slow_acker, daemon=True)
    acker.start()
    t0 = time.monotonic()
    with transport.PacketClient("127.0.0.1", listener.getsockname()[1]) as client:
        for ts in range(m):
            client.send(_tiny_packet(ts))
    elapsed = time.monotonic() - t0
    acker.join(timeout=10)
    listener.close()
    assert m / elapsed <= 1.0 / delay + 0.5, "ack gating must bound the send rate"

    # backpressure: buffer capacity 1 and a slow consumer gate the client
    consumer_delay, k = 0.06, 10
    with transport.PacketReceiver(port=0, buffer_capacity=1) as server:
        server.serve_in_background()

        def slow_consumer():
            while True:
                item = server.buffer.get(timeout=20)
                if item is None:
                    return
                time.sleep(consumer_delay)

        consumer = threading.Thread(target=slow_consumer, daemon=True)
        consumer.start()
        latencies = []
        with transport.PacketClient("127.0.0.1", server.port) as client:
            for ts in range(k):
                latencies.append(client.send(_tiny_packet(ts)).round_trip_s)
            client.send_end()
        consumer.join(timeout=20)
    steady = sorted(latencies[2:])[len(latencies[2:]) // 2]
    assert 0.6 * consumer_delay <= steady <= 2.0 * consumer_delay, (
        "client rate must track the consumer rate under backpressure")
    assert time.monotonic() - start < 90.0


# --- criterion 9: sampler behavior ---

def test_criterion_09_sampler(rng):
    start = time.monotonic()
    from segfuse.geometry import RGBDFrame

    intr = Intrinsics(fx=20.0, fy=20.0, cx=15.5, cy=11.5, width=32, height=24)
    rgb = rng.integers(0, 256, (24, 32, 3), dtype=np.uint8).astype(np.uint8)
    depth = np.full((24, 32), 1000, dtype=np.uint16)
    stationary = [RGBDFrame(rgb=rgb.copy(), depth=depth, intrinsics=intr, timestamp=t)
                  for t in range(100)]
    cfg = SamplerConfig(mode=MODE_IMAGE, similarity_threshold=0.995)
    state = SamplerState()
    kept = [should_keep(f, state, cfg) for f in stationary]
    assert sum(kept) == 1 and kept[0] is True, "stationary stream keeps exactly one frame"

    scene = simulator.box_scene()
    traj = simulator.orbit((0.0, 0.5, 0.0), 2.0, 40, height=-1.0, sweep=1.2)
    frames = []
    for t, pose in enumerate(traj):
        frame, _, _ = simulator.render(scene, pose, intr, timestamp=t)
        frames.append(frame)
    state = SamplerState()
    decisions = [should_keep(f, state, cfg) for f in frames]
    assert decisions == _oracle_image(frames, 0.995), "must equal the sequential oracle"

    state = SamplerState()
    disabled = SamplerConfig(enabled=False)
    assert all(should_keep(f, state, disabled) for f in frames)
    assert state.kept_count == len(frames)
    assert time.monotonic() - start < 5.0


# --- criterion 11: dynamic-object control ---

def test_criterion_11_dynamic_object_control():
    start = time.monotonic()
    traj = simulator.orbit((0, 0.55, 0), 1.5, 12, height=-0.9, sweep=0.08)

    def stream(moving):
        for t, pose in enumerate(traj):
            shift = 0.2 if (moving and t >= 6) else 0.0
            scene = simulator.Scene(primitives=simulator._chair((shift, 0.0), 0.5))
            frame, dets, _ = simulator.render(scene, pose, INTR, timestamp=t)
            yield from apply_masks(frame, suppress_masks(dets, score_floor=0.0))

    cfg = FusionConfig(use_pose_hints=False)
    _, static_report = fuse_stream(stream(False), cfg)
    _, moving_report = fuse_stream(stream(True), cfg)
    assert static_report.lost_count == 0
    static_res = np.nanmax([r.residual for r in static_report.records[1:] if r.tracked])
    tracked = [r.residual for r in moving_report.records[1:] if r.tracked]
    moving_res = np.nanmax(tracked) if tracked else np.inf
    degraded = (moving_report.lost_count > static_report.lost_count
                or moving_res > static_res)
    assert degraded, "moving the object mid-stream must strictly degrade tracking"
    assert time.monotonic() - start < 60.0
