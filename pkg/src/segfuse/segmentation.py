"""Instance-mask handling: duplicate suppression and per-object crops.

2D instance segmenters frequently emit the same physical object twice under
similar labels (chair vs couch). We resolve this with mask-level IoU: near
duplicates keep only the larger mask, partial overlaps give the contested
pixels to the higher-confidence detection. The result is a pairwise
disjoint set of masks, which are then applied to the RGB-D frame to
produce background-free per-object crops.

Mask sources are pluggable; neural inference stays outside this package.
The simulator provides ground-truth detections and ``ReplayMaskSource``
reads pre-segmented datasets from disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Protocol

import numpy as np

from .geometry import Intrinsics, RGBDFrame


def _tight_bbox(mask: np.ndarray):
    """(x0, y0, w, h) of the smallest rectangle containing all set pixels."""
    vs, us = np.nonzero(mask)
    if len(vs) == 0:
        raise ValueError("mask has no set pixels")
    x0, y0 = int(us.min()), int(vs.min())
    return (x0, y0, int(us.max()) - x0 + 1, int(vs.max()) - y0 + 1)


@dataclass
class Detection:
    """One instance mask with its category label and confidence score."""

    label: str
    confidence: float
    mask: np.ndarray
    bbox: tuple = None  # (x0, y0, w, h), tight around the mask

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError("mask must be 2D")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")
        self.bbox = _tight_bbox(self.mask)

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class ObjectCrop:
    """Masked RGB-D cutout of one object, cropped to its bounding box.

    Pixels outside the instance mask are zeroed in both channels, so a crop
    carries no background. ``bbox_origin`` locates the crop in the source
    image; ``intrinsics`` are those of the full frame.
    """

    label: str
    confidence: float
    rgb: np.ndarray
    depth: np.ndarray
    bbox_origin: tuple
    frame_timestamp: int
    intrinsics: Intrinsics

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError("rgb and depth crop dimensions differ")


class MaskSource(Protocol):
    """Anything that yields detections for a frame (simulator, replay, ...)."""

    def detect(self, frame: RGBDFrame) -> List[Detection]:
        ...


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection pixels over union pixels; 0 when the union is empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dimension mismatch: {a.shape} vs {b.shape}")
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(inter) / float(union)


def suppress_masks(
    dets: List[Detection],
    iou_threshold: float = 0.45,
    score_floor: float = 0.35,
) -> List[Detection]:
    """Remove duplicate detections and make the surviving masks disjoint.

    Three stages, processed in descending-confidence order for determinism:

    1. detections scoring below ``score_floor`` are dropped outright;
    2. pairs with IoU above ``iou_threshold`` are duplicates of one object:
       the mask with fewer pixels is discarded (ties keep the higher score);
    3. remaining overlapping pairs are genuinely distinct objects: the
       intersection is assigned to the higher-confidence one by erasing it
       from the other mask.

    A mask emptied by stage 3 is dropped. Output is ordered by descending
    confidence and is pairwise disjoint.
    """
    survivors = sorted(
        (d for d in dets if d.confidence >= score_floor),
        key=lambda d: -d.confidence,
    )

    # stage 2: duplicate elimination
    kept: List[Detection] = []
    discarded = [False] * len(survivors)
    for i, a in enumerate(survivors):
        if discarded[i]:
            continue
        for j in range(i + 1, len(survivors)):
            if discarded[j]:
                continue
            b = survivors[j]
            if mask_iou(a.mask, b.mask) > iou_threshold:
                # a has the higher confidence (sort order); fewer pixels loses
                if a.pixel_count < b.pixel_count:
                    discarded[i] = True
                    break
                discarded[j] = True
        if not discarded[i]:
            kept.append(a)

    # stage 3: contested pixels go to the higher-confidence mask
    masks = [d.mask.copy() for d in kept]
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            overlap = np.logical_and(masks[i], masks[j])
            if overlap.any():
                masks[j] &= ~masks[i]

    out = []
    for det, mask in zip(kept, masks):
        if mask.any():
            out.append(Detection(label=det.label, confidence=det.confidence, mask=mask))
    return out


def apply_masks(frame: RGBDFrame, dets: List[Detection]) -> List[ObjectCrop]:
    """Cut one ObjectCrop per detection out of the frame.

    Detections are expected to be suppressed already (pairwise disjoint).
    Crop bounds equal the detection bbox; pixels outside the mask are zero.
    """
    crops = []
    for det in dets:
        if det.mask.shape != frame.depth.shape:
            raise ValueError("detection mask does not match frame dimensions")
        x0, y0, w, h = det.bbox
        sub = det.mask[y0:y0 + h, x0:x0 + w]
        rgb = frame.rgb[y0:y0 + h, x0:x0 + w].copy()
        depth = frame.depth[y0:y0 + h, x0:x0 + w].copy()
        rgb[~sub] = 0
        depth[~sub] = 0
        crops.append(
            ObjectCrop(
                label=det.label,
                confidence=det.confidence,
                rgb=rgb,
                depth=depth,
                bbox_origin=(x0, y0),
                frame_timestamp=frame.timestamp,
                intrinsics=frame.intrinsics,
            )
        )
    return crops


class ReplayMaskSource:
    """Reads per-frame instance masks saved by the dataset generator.

    Frame ``t`` is described by ``<dir>/<t:06d>.png`` (8-bit image, pixel
    value k marks instance k-1, 0 is background) plus ``<dir>/<t:06d>.jsonl``
    whose line k holds {"label": ..., "confidence": ...} for instance k.
    """

    def __init__(self, mask_dir):
        self.mask_dir = Path(mask_dir)

    def detect(self, frame: RGBDFrame) -> List[Detection]:
        from PIL import Image

        stem = f"{frame.timestamp:06d}"
        png = self.mask_dir / f"{stem}.png"
        sidecar = self.mask_dir / f"{stem}.jsonl"
        if not png.exists() or not sidecar.exists():
            raise FileNotFoundError(f"no mask files for frame {frame.timestamp} in {self.mask_dir}")
        ids = np.asarray(Image.open(png), dtype=np.uint8)
        dets = []
        with open(sidecar, "r", encoding="utf-8") as f:
            for k, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                meta = json.loads(line)
                mask = ids == k
                if mask.any():
                    dets.append(
                        Detection(
                            label=meta["label"],
                            confidence=float(meta["confidence"]),
                            mask=mask,
                        )
                    )
        return dets
