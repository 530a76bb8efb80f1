"""Client-side keyframe extraction.

Consecutive frames from a slowly moving camera are mostly redundant; the
sampler keeps a frame only when it differs enough from the last kept one,
either by camera motion (Euclidean distance between flattened pose
matrices) or by appearance (cosine similarity between flattened grayscale
images). The first frame of a stream is always a keyframe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import RGBDFrame

MODE_POSE = "pose"
MODE_IMAGE = "image"


@dataclass
class SamplerConfig:
    mode: str = MODE_IMAGE
    distance_threshold: float = 0.05
    similarity_threshold: float = 0.995
    enabled: bool = True

    def __post_init__(self):
        if self.mode not in (MODE_POSE, MODE_IMAGE):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.distance_threshold < 0:
            raise ValueError("distance_threshold must be >= 0")
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must be in [-1, 1]")


@dataclass
class SamplerState:
    last_keyframe: Optional[RGBDFrame] = None
    kept_count: int = 0
    dropped_count: int = 0
    _last_signature: Optional[np.ndarray] = field(default=None, repr=False)


def euclidean_distance(a, b) -> float:
    """Root of the summed squared element differences of two equal-length
    vectors (the Frobenius norm when the inputs are flattened matrices)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def cosine_similarity(a, b) -> float:
    """dot(a, b) / (|a| * |b|), clipped to [-1, 1] against rounding."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luma conversion (0.299 R + 0.587 G + 0.114 B) normalized to [0, 1]."""
    img = np.asarray(rgb, dtype=np.float64)
    return (img @ np.array([0.299, 0.587, 0.114])) / 255.0


def _signature(frame: RGBDFrame, mode: str) -> np.ndarray:
    if mode == MODE_POSE:
        if frame.pose_hint is None:
            raise ValueError("pose-mode sampling requires a frame pose_hint")
        return frame.pose_hint.matrix.ravel()
    return grayscale(frame.rgb).ravel()


def should_keep(frame: RGBDFrame, state: SamplerState, cfg: SamplerConfig) -> bool:
    """Decide keyframe vs discard and update the sampler state.

    pose mode keeps a frame when the flattened-pose distance to the last
    keyframe reaches ``distance_threshold``; image mode keeps it when the
    grayscale cosine similarity falls below ``similarity_threshold``.
    """
    if not cfg.enabled:
        state.last_keyframe = frame
        state._last_signature = None
        state.kept_count += 1
        return True

    sig = _signature(frame, cfg.mode)
    if state.last_keyframe is None:
        keep = True
    elif cfg.mode == MODE_POSE:
        keep = euclidean_distance(sig, state._last_signature) >= cfg.distance_threshold
    else:
        keep = cosine_similarity(sig, state._last_signature) < cfg.similarity_threshold

    if keep:
        state.last_keyframe = frame
        state._last_signature = sig
        state.kept_count += 1
    else:
        state.dropped_count += 1
    return keep
