"""Deterministic synthetic RGB-D scene renderer.

Stands in for both the depth camera and the neural segmenter: parametric
scenes (spheres, boxes, finite plane rectangles) are ray-cast analytically
per pixel, the nearest hit wins, and the hitting primitive's identity
yields pixel-perfect ground-truth instance masks. Depth gets optional
multiplicative Gaussian noise and dropout from a per-frame seeded RNG, so
every dataset is reproducible bit for bit from its seed.

Default camera parameters approximate a consumer RGB-D module: 640x480,
focal length 385 px, usable depth 0.6 m to 6 m, millimeter depth units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .geometry import Intrinsics, Pose, RGBDFrame
from .segmentation import Detection

DEFAULT_INTRINSICS = Intrinsics(
    fx=385.0, fy=385.0, cx=319.5, cy=239.5, width=640, height=480, depth_scale=0.001
)
DEFAULT_RANGE = (0.6, 6.0)
BACKGROUND_RGB = (31, 31, 36)

SHAPE_SPHERE = "sphere"
SHAPE_BOX = "box"
SHAPE_PLANE = "plane"


@dataclass(frozen=True)
class ScenePrimitive:
    """One analytic object: a sphere, an oriented box, or a plane rectangle.

    ``size`` is (radius,) for spheres, (hx, hy, hz) half-extents for boxes,
    and (hx, hy) half-extents of the z=0 rectangle for planes, all in the
    primitive's local frame given by ``pose``.
    """

    shape: str
    pose: Pose
    size: Tuple[float, ...]
    albedo: Tuple[float, float, float]
    label: str
    instance_id: int

    def __post_init__(self):
        expected = {SHAPE_SPHERE: 1, SHAPE_BOX: 3, SHAPE_PLANE: 2}
        if self.shape not in expected:
            raise ValueError(f"unknown shape {self.shape!r}")
        if len(self.size) != expected[self.shape]:
            raise ValueError(f"{self.shape} needs {expected[self.shape]} size parameters")
        if any(s <= 0 for s in self.size):
            raise ValueError("size parameters must be positive")
        if not self.label:
            raise ValueError("label must be nonempty")


@dataclass
class Scene:
    primitives: List[ScenePrimitive] = field(default_factory=list)
    background_labels: frozenset = frozenset({"floor", "wall", "background"})

    def moved(self, instance_id: int, new_pose: Pose) -> "Scene":
        """Copy of the scene with one primitive re-posed (dynamic objects)."""
        prims = [
            replace(p, pose=new_pose) if p.instance_id == instance_id else p
            for p in self.primitives
        ]
        return Scene(primitives=prims, background_labels=self.background_labels)


@dataclass(frozen=True)
class NoiseModel:
    """Depth sigma grows linearly with range: sigma(z) = k * z."""

    k: float = 0.005
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("invalid noise parameters")


@dataclass
class Trajectory:
    poses: List[Pose]

    def __post_init__(self):
        if not self.poses:
            raise ValueError("trajectory needs at least one pose")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)


def look_at(eye, target, down_hint=(0.0, 1.0, 0.0)) -> Pose:
    """Camera pose at ``eye`` looking toward ``target`` (+Z forward, +Y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("eye and target coincide")
    z = z / nz
    down = np.asarray(down_hint, dtype=np.float64)
    x = np.cross(down, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross((1.0, 0.0, 0.0), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=1)
    return Pose.from_rt(r, eye)


def orbit(center, radius: float, steps: int, axis=(0.0, 1.0, 0.0),
          height: float = 0.0, start_angle: float = 0.0,
          sweep: float = 2.0 * np.pi) -> Trajectory:
    """Camera positions on a circle around ``axis``, all looking at ``center``.

    ``height`` offsets the circle along the axis; ``sweep`` < 2*pi gives a
    partial arc whose consecutive steps are equal-length chords.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    center = np.asarray(center, dtype=np.float64)
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    ref = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(a, ref)
    u = u / np.linalg.norm(u)
    v = np.cross(a, u)
    full_circle = abs(sweep - 2.0 * np.pi) < 1e-12
    denom = steps if full_circle else max(steps - 1, 1)
    poses = []
    for i in range(steps):
        theta = start_angle + sweep * i / denom
        pos = center + radius * (np.cos(theta) * u + np.sin(theta) * v) + height * a
        poses.append(look_at(pos, center))
    return Trajectory(poses)


def line(start, end, steps: int, target=None) -> Trajectory:
    """Equally spaced camera positions from start to end."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    poses = []
    for i in range(steps):
        t = i / max(steps - 1, 1)
        pos = start + t * (end - start)
        aim = np.asarray(target, dtype=np.float64) if target is not None else pos + (end - start)
        poses.append(look_at(pos, aim))
    return Trajectory(poses)


def stationary(pose: Pose, steps: int) -> Trajectory:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return Trajectory([pose] * steps)


def _intersect(prim: ScenePrimitive, origin_local: np.ndarray, dirs_local: np.ndarray) -> np.ndarray:
    """Ray parameter of the nearest hit per pixel, +inf where the ray misses.

    Rays are o + t*d in the primitive's local frame; t equals camera-space
    z because directions are built with unit z in the camera frame.
    """
    o = origin_local
    d = dirs_local
    miss = np.inf
    if prim.shape == SHAPE_SPHERE:
        r = prim.size[0]
        a = np.sum(d * d, axis=-1)
        b = 2.0 * np.sum(d * o, axis=-1)
        c = float(np.dot(o, o)) - r * r
        disc = b * b - 4.0 * a * c
        hit = disc >= 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = (-b - sq) / (2.0 * a)
        return np.where(hit & (t > 0.0), t, miss)
    if prim.shape == SHAPE_BOX:
        h = np.asarray(prim.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / d
            t2 = (h - o) / d
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        # a zero direction component inside the slab yields -inf/+inf; NaN
        # appears only when the origin sits exactly on a face plane
        lo = np.nan_to_num(lo, nan=-np.inf)
        hi = np.nan_to_num(hi, nan=np.inf)
        tmin = lo.max(axis=-1)
        tmax = hi.min(axis=-1)
        hit = (tmax >= tmin) & (tmin > 0.0)
        return np.where(hit, tmin, miss)
    # plane rectangle in local z = 0
    hx, hy = prim.size
    dz = d[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / dz
        p = o[None, None, :] + t[..., None] * d
        hit = ((np.abs(dz) > 1e-12) & (t > 0.0)
               & (np.abs(p[..., 0]) <= hx) & (np.abs(p[..., 1]) <= hy))
    return np.where(hit, t, miss)


def render(
    scene: Scene,
    pose: Pose,
    intrinsics: Intrinsics = DEFAULT_INTRINSICS,
    noise: Optional[NoiseModel] = None,
    timestamp: int = 0,
    z_range: Tuple[float, float] = DEFAULT_RANGE,
):
    """Ray-cast the scene from ``pose``.

    Returns (frame, detections, pose): the rendered RGBDFrame (pose_hint set
    to the ground-truth pose), one Detection per visible non-background
    primitive with a pixel-exact mask and confidence 1.0, and the pose.
    """
    intr = intrinsics
    us = np.arange(intr.width, dtype=np.float64)
    vs = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    dirs_cam = np.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1
    )
    r_wc = pose.rotation
    dirs_world = dirs_cam @ r_wc.T
    origin_world = pose.translation

    n = len(scene.primitives)
    depth_all = np.full((max(n, 1), intr.height, intr.width), np.inf)
    for i, prim in enumerate(scene.primitives):
        r_pl = prim.pose.rotation.T
        o_local = r_pl @ (origin_world - prim.pose.translation)
        d_local = dirs_world @ r_pl.T
        depth_all[i] = _intersect(prim, o_local, d_local)

    nearest = depth_all.argmin(axis=0)
    z_true = depth_all.min(axis=0)
    hit = np.isfinite(z_true) & (z_true >= z_range[0]) & (z_true <= z_range[1])

    rgb = np.empty((intr.height, intr.width, 3), dtype=np.uint8)
    rgb[:] = BACKGROUND_RGB
    for i, prim in enumerate(scene.primitives):
        mask = hit & (nearest == i)
        rgb[mask] = np.clip(np.asarray(prim.albedo) * 255.0 + 0.5, 0, 255).astype(np.uint8)

    z = z_true.copy()
    valid = hit.copy()
    if noise is not None and (noise.k > 0 or noise.dropout > 0):
        rng = np.random.default_rng([noise.seed, int(timestamp)])
        if noise.k > 0:
            z = z + rng.standard_normal(z.shape) * (noise.k * np.where(hit, z_true, 1.0))
        if noise.dropout > 0:
            valid &= rng.random(z.shape) >= noise.dropout
        valid &= (z >= z_range[0]) & (z <= z_range[1])

    depth_units = np.zeros(z.shape, dtype=np.uint16)
    quant = np.round(np.where(valid, z, 0.0) / intr.depth_scale)
    depth_units[valid] = np.clip(quant[valid], 1, 65535).astype(np.uint16)

    frame = RGBDFrame(rgb=rgb, depth=depth_units, intrinsics=intr,
                      timestamp=timestamp, pose_hint=pose)
    detections = []
    seen = []
    for i, prim in enumerate(scene.primitives):
        if prim.label in scene.background_labels:
            continue
        key = (prim.label, prim.instance_id)
        if key in seen:
            continue
        mask = np.zeros(hit.shape, dtype=bool)
        for j, other in enumerate(scene.primitives):
            if (other.label, other.instance_id) == key:
                mask |= hit & (nearest == j)
        if mask.any():
            seen.append(key)
            detections.append(Detection(label=prim.label, confidence=1.0, mask=mask))
    return frame, detections, pose


class SimulatedSource:
    """Iterates (frame, detections) along a trajectory; the mask oracle."""

    def __init__(self, scene: Scene, trajectory: Trajectory,
                 intrinsics: Intrinsics = DEFAULT_INTRINSICS,
                 noise: Optional[NoiseModel] = None,
                 z_range: Tuple[float, float] = DEFAULT_RANGE):
        self.scene = scene
        self.trajectory = trajectory
        self.intrinsics = intrinsics
        self.noise = noise
        self.z_range = z_range

    def __len__(self):
        return len(self.trajectory)

    def __iter__(self) -> Iterator[Tuple[RGBDFrame, List[Detection]]]:
        for t, pose in enumerate(self.trajectory):
            frame, dets, _ = render(self.scene, pose, self.intrinsics,
                                    self.noise, timestamp=t, z_range=self.z_range)
            yield frame, dets


# --- scene description files and on-disk datasets ---

def _pose_to_list(pose: Pose):
    return [[float(x) for x in row] for row in pose.matrix]


def _pose_from_list(rows) -> Pose:
    return Pose(np.asarray(rows, dtype=np.float64))


def scene_to_dict(scene: Scene) -> dict:
    return {
        "background_labels": sorted(scene.background_labels),
        "primitives": [
            {
                "shape": p.shape,
                "pose": _pose_to_list(p.pose),
                "size": list(p.size),
                "albedo": list(p.albedo),
                "label": p.label,
                "instance_id": p.instance_id,
            }
            for p in scene.primitives
        ],
    }


def scene_from_dict(data: dict) -> Scene:
    prims = [
        ScenePrimitive(
            shape=p["shape"],
            pose=_pose_from_list(p["pose"]),
            size=tuple(p["size"]),
            albedo=tuple(p["albedo"]),
            label=p["label"],
            instance_id=int(p["instance_id"]),
        )
        for p in data["primitives"]
    ]
    return Scene(primitives=prims,
                 background_labels=frozenset(data.get("background_labels", ())))


def _dump_json(path: Path, data) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def generate_dataset(
    scene: Scene,
    trajectory: Trajectory,
    out_dir,
    intrinsics: Intrinsics = DEFAULT_INTRINSICS,
    noise: Optional[NoiseModel] = None,
    z_range: Tuple[float, float] = DEFAULT_RANGE,
) -> Path:
    """Render the trajectory to disk: RGB/depth/mask PNGs plus metadata.

    Layout per frame t: frames/<t>_rgb.png, frames/<t>_depth.png (16-bit),
    frames/<t>_meta.json, masks/<t>.png (8-bit instance image) and
    masks/<t>.jsonl (one {"label", "confidence"} line per instance value).
    Regenerating with the same inputs produces byte-identical files.
    """
    from PIL import Image

    out = Path(out_dir)
    frames_dir = out / "frames"
    masks_dir = out / "masks"
    frames_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)

    for t, pose in enumerate(trajectory):
        frame, dets, _ = render(scene, pose, intrinsics, noise, timestamp=t, z_range=z_range)
        stem = f"{t:06d}"
        Image.fromarray(frame.rgb).save(frames_dir / f"{stem}_rgb.png")
        Image.fromarray(frame.depth).save(frames_dir / f"{stem}_depth.png")
        ids = np.zeros(frame.depth.shape, dtype=np.uint8)
        for k, det in enumerate(dets, start=1):
            ids[det.mask] = k
        Image.fromarray(ids).save(masks_dir / f"{stem}.png")
        with open(masks_dir / f"{stem}.jsonl", "w", encoding="utf-8") as f:
            for det in dets:
                f.write(json.dumps({"label": det.label, "confidence": det.confidence},
                                   sort_keys=True, separators=(",", ":")) + "\n")
        _dump_json(
            frames_dir / f"{stem}_meta.json",
            {
                "timestamp": t,
                "pose": _pose_to_list(pose),
                "intrinsics": {
                    "fx": intrinsics.fx, "fy": intrinsics.fy,
                    "cx": intrinsics.cx, "cy": intrinsics.cy,
                    "width": intrinsics.width, "height": intrinsics.height,
                    "depth_scale": intrinsics.depth_scale,
                },
            },
        )
    _dump_json(out / "scene.json", scene_to_dict(scene))
    return out


class DatasetSource:
    """Replays a generated dataset as (frame, detections) pairs."""

    def __init__(self, dataset_dir):
        from .segmentation import ReplayMaskSource

        self.root = Path(dataset_dir)
        self.frames_dir = self.root / "frames"
        if not self.frames_dir.is_dir():
            raise FileNotFoundError(f"{self.root} is not a dataset directory (missing frames/)")
        self.metas = sorted(self.frames_dir.glob("*_meta.json"))
        if not self.metas:
            raise FileNotFoundError(f"no frames found under {self.frames_dir}")
        self.mask_source = ReplayMaskSource(self.root / "masks")

    def __len__(self):
        return len(self.metas)

    def validate(self) -> None:
        """Raise with the full list of missing frame or mask files."""
        missing = []
        for meta_path in self.metas:
            stem = meta_path.name.replace("_meta.json", "")
            for candidate in (
                self.frames_dir / f"{stem}_rgb.png",
                self.frames_dir / f"{stem}_depth.png",
                self.root / "masks" / f"{stem}.png",
                self.root / "masks" / f"{stem}.jsonl",
            ):
                if not candidate.exists():
                    missing.append(str(candidate))
        if missing:
            raise FileNotFoundError(
                f"dataset {self.root} is missing {len(missing)} file(s): "
                + ", ".join(missing)
            )

    def _load_frame(self, meta_path: Path) -> RGBDFrame:
        from PIL import Image

        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        stem = f"{meta['timestamp']:06d}"
        rgb_path = self.frames_dir / f"{stem}_rgb.png"
        depth_path = self.frames_dir / f"{stem}_depth.png"
        for p in (rgb_path, depth_path):
            if not p.exists():
                raise FileNotFoundError(f"dataset is missing {p}")
        rgb = np.asarray(Image.open(rgb_path), dtype=np.uint8)
        depth = np.asarray(Image.open(depth_path), dtype=np.uint16)
        ii = meta["intrinsics"]
        intr = Intrinsics(fx=ii["fx"], fy=ii["fy"], cx=ii["cx"], cy=ii["cy"],
                          width=ii["width"], height=ii["height"],
                          depth_scale=ii["depth_scale"])
        return RGBDFrame(rgb=rgb, depth=depth, intrinsics=intr,
                         timestamp=int(meta["timestamp"]),
                         pose_hint=_pose_from_list(meta["pose"]))

    def __iter__(self) -> Iterator[Tuple[RGBDFrame, List[Detection]]]:
        for meta_path in self.metas:
            frame = self._load_frame(meta_path)
            yield frame, self.mask_source.detect(frame)


# --- canned scenes used by fixtures, examples, and the CLI ---

def sphere_scene(radius: float = 0.5, center=(0.0, 0.0, 0.0)) -> Scene:
    return Scene(primitives=[
        ScenePrimitive(shape=SHAPE_SPHERE, pose=Pose.from_rt(np.eye(3), center),
                       size=(radius,), albedo=(0.8, 0.3, 0.25), label="ball", instance_id=0),
    ])


def _floor(half: float = 3.0, y: float = 1.0) -> ScenePrimitive:
    # plane normal along local z; rotate local z onto world -y (pointing up)
    r = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    return ScenePrimitive(shape=SHAPE_PLANE, pose=Pose.from_rt(r, (0.0, y, 0.0)),
                          size=(half, half), albedo=(0.45, 0.42, 0.38),
                          label="floor", instance_id=100)


def _yaw(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _chair(origin, yaw: float, seat=(0.3, 0.14, 0.3), albedo=(0.2, 0.45, 0.75),
           label: str = "chair", instance_id: int = 0, floor_y: float = 1.0):
    """Seat box plus backrest box, one instance.

    The concave seat/backrest junction is what makes a chair trackable:
    a lone convex box lets point-to-plane alignment slide along its faces.
    """
    r = _yaw(yaw)
    sx, sy, sz = seat
    back_half = (sx, 0.28, 0.05)
    seat_center = np.array([0.0, -sy, 0.0])
    back_center = np.array([0.0, -2 * sy - back_half[1], -(sz - back_half[2])])
    base = np.array([origin[0], floor_y, origin[1] if len(origin) == 2 else origin[2]])
    return [
        ScenePrimitive(shape=SHAPE_BOX,
                       pose=Pose.from_rt(r, base + r @ seat_center),
                       size=seat, albedo=albedo, label=label, instance_id=instance_id),
        ScenePrimitive(shape=SHAPE_BOX,
                       pose=Pose.from_rt(r, base + r @ back_center),
                       size=back_half, albedo=albedo, label=label, instance_id=instance_id),
    ]


def box_scene(with_floor: bool = True, yaw: float = 0.5) -> Scene:
    """A single chair proxy standing on an optional floor plane."""
    prims = _chair((0.0, 0.0), yaw)
    if with_floor:
        prims.append(_floor())
    return Scene(primitives=prims)


LOUNGE_CHAIRS = ((-1.3, -0.1), (0.1, -1.3), (-0.1, 1.3))
LOUNGE_TABLE = (0.0, 0.1)


def lounge_scene() -> Scene:
    """Floor + three chairs + one table; the two-category pipeline fixture.

    Laid out for the partial camera arc of :func:`lounge_trajectory`:
    every chair keeps its open (seat) side toward the cameras so none
    reconstructs as a disconnected backrest slab.
    """
    yaws = (1.0, 1.4, 2.0)
    prims = [_floor()]
    for i, ((x, z), yaw) in enumerate(zip(LOUNGE_CHAIRS, yaws)):
        prims.extend(_chair((x, z), yaw, albedo=(0.2 + 0.1 * i, 0.4, 0.7),
                            instance_id=i))
    # table: top slab over a nearly-flush base block, one instance; a wide
    # overhang would hide the base (leaving tracking a single plane) and
    # its unobservable underside would disconnect the surface components
    r = _yaw(0.8)
    top_half = (0.48, 0.045, 0.38)
    leg_half = (0.46, 0.33, 0.36)
    base = np.array([LOUNGE_TABLE[0], 1.0, LOUNGE_TABLE[1]])
    prims.append(ScenePrimitive(
        shape=SHAPE_BOX,
        pose=Pose.from_rt(r, base + r @ np.array([0.0, -2 * leg_half[1] - top_half[1], 0.0])),
        size=top_half, albedo=(0.65, 0.5, 0.3), label="table", instance_id=10))
    prims.append(ScenePrimitive(
        shape=SHAPE_BOX,
        pose=Pose.from_rt(r, base + r @ np.array([0.0, -leg_half[1], 0.0])),
        size=leg_half, albedo=(0.6, 0.45, 0.28), label="table", instance_id=10))
    return Scene(primitives=prims)


def lounge_trajectory(steps: int = 60) -> Trajectory:
    """Full circle around the lounge: every object is seen from all sides,
    so instance centroids are unbiased by visibility."""
    return orbit(center=(0.0, 0.6, 0.0), radius=2.2, steps=steps, height=-1.1)


LOUNGE_INTRINSICS = Intrinsics(fx=192.5, fy=192.5, cx=159.5, cy=119.5,
                               width=320, height=240, depth_scale=0.001)
