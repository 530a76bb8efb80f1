"""Frame-to-model RGB-D odometry.

Aligns an input frame against a frame synthesized from the model by
minimizing the point-to-plane distance of projectively associated points:

    E(X) = sum_i ( n_i . (X p_i - q_i) )^2

over the 6-dof rigid motion X, coarse-to-fine across an image pyramid with
Gauss-Newton steps on the twist. Iterations that raise the residual are
rejected, so accepted residuals are non-increasing within a level. An
optional photometric term adds intensity constancy against the synthesized
color image; geometry alone is the default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from ..geometry import Intrinsics, Pose, RGBDFrame, compose, inverse
from ..segmentation import ObjectCrop
from .grid import _adaptive_smooth, _observation
from .raycast import SynthesizedFrame


class TrackingLostError(RuntimeError):
    """Too few valid correspondences to estimate the motion."""


@dataclass
class OdometryConfig:
    pyramid_levels: int = 3
    max_iterations: int = 30
    convergence_delta: float = 1e-6
    max_correspondence_dist: float = 0.1
    min_correspondences: int = 100
    initial_damping: float = 1e-4
    # reject pairs whose source/target normals disagree by more than this;
    # model normals smear near object edges and would bias the solve
    max_normal_angle_deg: float = 40.0
    huber_delta: float = 0.01
    # strength of an optional external-odometry prior: twist deviations of
    # this magnitude cost as much as point_sigma of point residual per pair
    prior_sigma: float = 0.02
    prior_point_sigma: float = 0.001
    photometric: bool = False
    photometric_weight: float = 0.05


@dataclass
class OdometryResult:
    pose: Pose  # refined camera-to-world pose of the input frame
    delta: Pose  # refinement relative to the initial guess
    # unweighted RMS point-to-plane distance at the final pose, meters;
    # robust weighting applies to the solve, not to this quality figure
    residual: float
    iterations: int
    converged: bool
    inlier_count: int
    # (rms before, rms after) under the association of each accepted step
    step_residuals: list = field(default_factory=list)


def twist_to_pose(delta: np.ndarray) -> Pose:
    """SE(3) exponential of a twist (omega, v), rotation-first."""
    omega = np.asarray(delta[:3], dtype=np.float64)
    v = np.asarray(delta[3:], dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        r = np.eye(3)
        t = v
    else:
        k = omega / theta
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        r = np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)
        a = np.sin(theta) / theta
        b = (1 - np.cos(theta)) / theta
        c = (theta - np.sin(theta)) / theta
        vmat = a * np.eye(3) + b * kx + c * np.outer(k, k)
        # re-orthonormalize against rounding before the Pose invariant check
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        t = vmat @ v
    return Pose.from_rt(r, t)


def pose_to_twist(matrix: np.ndarray) -> np.ndarray:
    """SE(3) logarithm: twist (omega, v) with twist_to_pose as inverse."""
    r = matrix[:3, :3]
    t = matrix[:3, 3]
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < 1e-9:
        return np.concatenate([np.zeros(3), t])
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    axis = axis / (2.0 * np.sin(theta))
    omega = theta * axis
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    half = theta / 2.0
    v_inv = (np.eye(3) - half * kx
             + (1.0 - half / np.tan(half)) * (kx @ kx))
    return np.concatenate([omega, v_inv @ t])


def point_to_plane_system(points: np.ndarray, targets: np.ndarray,
                          normals: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Residuals and analytic Jacobian of the point-to-plane error.

    ``points`` are already transformed by the current estimate. Row i of
    the Jacobian is d r_i / d twist for a left-multiplied increment
    exp(delta) X, i.e. [ (p x n)^T, n^T ].
    """
    r = np.einsum("ij,ij->i", points - targets, normals)
    j = np.empty((len(points), 6), dtype=np.float64)
    j[:, :3] = np.cross(points, normals)
    j[:, 3:] = normals
    return r, j


def _intensity(color: np.ndarray) -> np.ndarray:
    return color @ np.array([0.299, 0.587, 0.114])


def _image_gradients(img: np.ndarray):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = (img[:, 2:] - img[:, :-2]) * 0.5
    gy[1:-1, :] = (img[2:, :] - img[:-2, :]) * 0.5
    return gx, gy


@dataclass
class _Level:
    intr: Intrinsics
    src_points: np.ndarray  # input-frame camera points
    src_normals: np.ndarray  # input-frame normals (camera frame)
    src_intensity: Optional[np.ndarray]
    tgt_points: np.ndarray  # synthesized camera points, (H, W, 3)
    tgt_normals: np.ndarray
    tgt_valid: np.ndarray
    tgt_intensity: Optional[np.ndarray] = None
    tgt_grad: Optional[Tuple[np.ndarray, np.ndarray]] = None


def _depth_normals(depth_m: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Per-pixel normals from central differences of the vertex map.

    Depth is smoothed first and differenced over a 2-pixel baseline so
    sensor noise does not swamp the orientation estimate. Zero where depth
    is missing or discontinuous; oriented to face the camera like the ray
    caster's gradient normals.
    """
    h, w = depth_m.shape
    smoothed = _adaptive_smooth(depth_m)
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    pts = np.empty((h, w, 3))
    pts[..., 0] = (uu - intr.cx) * smoothed / intr.fx
    pts[..., 1] = (vv - intr.cy) * smoothed / intr.fy
    pts[..., 2] = smoothed
    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[:, 2:-2] = (pts[:, 4:] - pts[:, :-4]) * 0.25
    dv[2:-2, :] = (pts[4:, :] - pts[:-4, :]) * 0.25
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    ok = np.ones((h, w), dtype=bool)
    pad = np.pad(smoothed, 2)
    lo = np.full((h, w), np.inf)
    hi = np.zeros((h, w))
    for dy in (-2, 0, 2):
        for dx in (-2, 0, 2):
            win = pad[2 + dy:h + 2 + dy, 2 + dx:w + 2 + dx]
            ok &= win > 0
            lo = np.minimum(lo, win)
            hi = np.maximum(hi, win)
    ok &= (hi - lo) < 0.1  # depth jump: normal undefined
    ok &= norm[..., 0] > 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(ok[..., None], n / np.maximum(norm, 1e-15), 0.0)
    # orient against the viewing ray so conventions match the ray caster
    view = pts / np.maximum(np.linalg.norm(pts, axis=-1, keepdims=True), 1e-15)
    flip = np.einsum("hwc,hwc->hw", n, view) > 0
    n[flip] = -n[flip]
    return n


def _build_levels(input_frame, synthesized: SynthesizedFrame,
                  cfg: OdometryConfig) -> list:
    depth_in, color_in, intr = _observation(input_frame)
    if (intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height) != (
        synthesized.intrinsics.fx, synthesized.intrinsics.fy,
        synthesized.intrinsics.cx, synthesized.intrinsics.cy,
        synthesized.intrinsics.width, synthesized.intrinsics.height,
    ):
        raise ValueError("input and synthesized frames must share intrinsics")

    # normals once at full resolution, subsampled per level: recomputing on
    # decimated depth would erode small objects' coarse-level coverage
    normals_full = _depth_normals(depth_in.astype(np.float64), intr)

    levels = []
    for lv in range(cfg.pyramid_levels):
        s = 2 ** lv
        d_in = depth_in[::s, ::s]
        intr_l = Intrinsics(intr.fx / s, intr.fy / s, intr.cx / s, intr.cy / s,
                            d_in.shape[1], d_in.shape[0], intr.depth_scale)
        n_in = normals_full[::s, ::s]
        vs, us = np.nonzero((d_in > 0) & (np.linalg.norm(n_in, axis=-1) > 0.5))
        z = d_in[vs, us].astype(np.float64)
        src = np.stack([(us - intr_l.cx) * z / intr_l.fx,
                        (vs - intr_l.cy) * z / intr_l.fy, z], axis=1)
        d_t = synthesized.depth[::s, ::s].astype(np.float64)
        n_t = synthesized.normals[::s, ::s].astype(np.float64)
        h, w = d_t.shape
        uu, vv = np.meshgrid(np.arange(w), np.arange(h))
        tgt = np.empty((h, w, 3))
        tgt[..., 0] = (uu - intr_l.cx) * d_t / intr_l.fx
        tgt[..., 1] = (vv - intr_l.cy) * d_t / intr_l.fy
        tgt[..., 2] = d_t
        valid_t = (d_t > 0) & (np.linalg.norm(n_t, axis=-1) > 0.5)
        if lv == 0:
            # drop the synthesized outline ring at full resolution: model
            # edges carry smeared depth that would bias the fine alignment
            interior = valid_t.copy()
            interior[1:, :] &= valid_t[:-1, :]
            interior[:-1, :] &= valid_t[1:, :]
            interior[:, 1:] &= valid_t[:, :-1]
            interior[:, :-1] &= valid_t[:, 1:]
            valid_t = interior
        level = _Level(intr=intr_l, src_points=src, src_normals=n_in[vs, us],
                       src_intensity=None, tgt_points=tgt, tgt_normals=n_t,
                       tgt_valid=valid_t)
        if cfg.photometric:
            level.src_intensity = _intensity(color_in)[::s, ::s][vs, us]
            tgt_i = _intensity(synthesized.color.astype(np.float64))[::s, ::s]
            level.tgt_intensity = tgt_i
            level.tgt_grad = _image_gradients(tgt_i)
        levels.append(level)
    return levels


def _associate(level: _Level, x_mat: np.ndarray, cfg: OdometryConfig):
    """Project transformed source points into the synthesized frame."""
    p = level.src_points @ x_mat[:3, :3].T + x_mat[:3, 3]
    z = p[:, 2]
    ok = z > 1e-6
    intr = level.intr
    u = np.where(ok, p[:, 0] / np.where(ok, z, 1.0) * intr.fx + intr.cx, -1.0)
    v = np.where(ok, p[:, 1] / np.where(ok, z, 1.0) * intr.fy + intr.cy, -1.0)
    ui = np.round(u).astype(np.int64)
    vi = np.round(v).astype(np.int64)
    ok &= (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    ui_s = np.where(ok, ui, 0)
    vi_s = np.where(ok, vi, 0)
    ok &= level.tgt_valid[vi_s, ui_s]
    q = level.tgt_points[vi_s, ui_s]
    n = level.tgt_normals[vi_s, ui_s]
    ok &= np.linalg.norm(p - q, axis=1) <= cfg.max_correspondence_dist
    n_src = level.src_normals @ x_mat[:3, :3].T
    cos_min = np.cos(np.radians(cfg.max_normal_angle_deg))
    ok &= np.einsum("ij,ij->i", n_src, n) >= cos_min
    return p[ok], q[ok], n[ok], ok, (vi_s[ok], ui_s[ok])


def track_frame(
    input_frame: Union[RGBDFrame, ObjectCrop],
    synthesized: SynthesizedFrame,
    init: Pose,
    cfg: Optional[OdometryConfig] = None,
    prior: Optional[Pose] = None,
) -> OdometryResult:
    """Refine the input frame's pose against the synthesized model view.

    ``prior``, when given, is an externally estimated pose (odometry, a
    transported hint) fused as a weak quadratic pull in the solve: it
    regularizes directions the geometry leaves unconstrained without
    overriding the alignment. Raises TrackingLostError when the coarsest
    level has fewer than ``min_correspondences`` valid pairs.
    """
    cfg = cfg or OdometryConfig()
    levels = _build_levels(input_frame, synthesized, cfg)

    # X maps input-camera coordinates into the synthesized camera frame
    x_mat = (inverse(synthesized.pose).matrix @ init.matrix).copy()
    prior_mat = None
    if prior is not None:
        prior_mat = inverse(synthesized.pose).matrix @ prior.matrix
    total_iterations = 0
    converged = False
    residual = float("inf")
    inliers = 0
    steps = []
    damping = cfg.initial_damping

    for li, level in enumerate(reversed(levels)):  # coarse to fine
        coarsest = li == 0
        for _ in range(cfg.max_iterations):
            p, q, n, _, _ = _associate(level, x_mat, cfg)
            if coarsest and len(p) < cfg.min_correspondences:
                raise TrackingLostError(
                    f"{len(p)} correspondences at coarsest level "
                    f"(need {cfg.min_correspondences})"
                )
            if len(p) < 6:
                raise TrackingLostError(f"{len(p)} correspondences during refinement")
            r, j = point_to_plane_system(p, q, n)
            if cfg.photometric and level.tgt_intensity is not None:
                r_ph, j_ph = _photometric_system(level, x_mat, cfg)
                if len(r_ph):
                    w = cfg.photometric_weight
                    r = np.concatenate([r, w * r_ph])
                    j = np.concatenate([j, w * j_ph], axis=0)
            # Huber weights tame surface-reconstruction ripple outliers
            hub = np.sqrt(np.minimum(1.0, cfg.huber_delta / np.maximum(np.abs(r), 1e-12)))
            r = r * hub
            j = j * hub[:, None]
            rms = float(np.sqrt(np.mean(r ** 2)))
            residual = rms
            inliers = len(p)
            h = j.T @ j
            g = j.T @ r
            if prior_mat is not None:
                # weak pull toward the prior pose, linearized at X
                xi = pose_to_twist(x_mat @ np.linalg.inv(prior_mat))
                w_prior = len(p) * (cfg.prior_point_sigma / cfg.prior_sigma) ** 2
                h = h + w_prior * np.eye(6)
                g = g + w_prior * xi
            scale = max(float(np.trace(h)) / 6.0, 1e-12)

            # damped Gauss-Newton: a step must not raise the (geometric) cost
            # under the association in force, otherwise it is re-tried with
            # stronger damping
            geo_hub = hub[: len(p)]
            rms_geo = float(np.sqrt(np.mean((r[: len(p)]) ** 2)))
            accepted = False
            delta = None
            for _attempt in range(6):
                try:
                    delta = np.linalg.solve(h + damping * scale * np.eye(6), -g)
                except np.linalg.LinAlgError:
                    damping = max(damping * 10.0, 1e-3)
                    continue
                step_mat = twist_to_pose(delta).matrix
                x_try = step_mat @ x_mat
                p_new = p @ step_mat[:3, :3].T + step_mat[:3, 3]
                r_new = np.einsum("ij,ij->i", p_new - q, n) * geo_hub
                rms_new = float(np.sqrt(np.mean(r_new ** 2)))
                if rms_new <= rms_geo + 1e-12:
                    x_mat = x_try
                    steps.append((rms_geo, rms_new))
                    residual = rms_new
                    damping = max(damping / 3.0, 1e-7)
                    accepted = True
                    break
                damping = min(damping * 10.0, 1e3)
            total_iterations += 1
            if not accepted:
                break
            if np.linalg.norm(delta) < cfg.convergence_delta:
                converged = True
                break

    # alignment quality at the final pose, before any robust weighting
    p, q, n, _, _ = _associate(levels[0], x_mat, cfg)
    if len(p):
        raw, _ = point_to_plane_system(p, q, n)
        residual = float(np.sqrt(np.mean(raw ** 2)))
        inliers = len(p)

    refined = compose(synthesized.pose, Pose(x_mat))
    delta_pose = compose(inverse(init), refined)
    return OdometryResult(pose=refined, delta=delta_pose, residual=residual,
                          iterations=total_iterations, converged=converged,
                          inlier_count=inliers, step_residuals=steps)


def _photometric_system(level: _Level, x_mat: np.ndarray, cfg: OdometryConfig):
    """Intensity-constancy residuals against the synthesized image."""
    p = level.src_points @ x_mat[:3, :3].T + x_mat[:3, 3]
    z = p[:, 2]
    ok = z > 1e-6
    intr = level.intr
    zs = np.where(ok, z, 1.0)
    u = p[:, 0] / zs * intr.fx + intr.cx
    v = p[:, 1] / zs * intr.fy + intr.cy
    ui = np.round(u).astype(np.int64)
    vi = np.round(v).astype(np.int64)
    ok &= (ui >= 1) & (ui < intr.width - 1) & (vi >= 1) & (vi < intr.height - 1)
    ui_s = np.where(ok, ui, 1)
    vi_s = np.where(ok, vi, 1)
    ok &= level.tgt_valid[vi_s, ui_s]
    if not ok.any():
        return np.zeros(0), np.zeros((0, 6))
    p = p[ok]
    z = z[ok]
    r = level.tgt_intensity[vi_s[ok], ui_s[ok]] - level.src_intensity[ok]
    gx = level.tgt_grad[0][vi_s[ok], ui_s[ok]]
    gy = level.tgt_grad[1][vi_s[ok], ui_s[ok]]
    # chain rule: dI/d(twist) = grad_I * d(pixel)/d(p_cam) * d(p_cam)/d(twist)
    du_dp = np.stack([intr.fx / z, np.zeros_like(z), -intr.fx * p[:, 0] / z ** 2], axis=1)
    dv_dp = np.stack([np.zeros_like(z), intr.fy / z, -intr.fy * p[:, 1] / z ** 2], axis=1)
    di_dp = gx[:, None] * du_dp + gy[:, None] * dv_dp
    j = np.empty((len(p), 6))
    j[:, :3] = np.cross(p, di_dp)
    j[:, 3:] = di_dp
    return r, j
