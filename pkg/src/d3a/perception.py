"""Synthetic detector, color-histogram embeddings and planar projection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Point, RawDetection, RobotPose


@dataclass(frozen=True)
class SynthDetectorParams:
    num_gt_objects: int
    fpr: float = 0.0
    fnr: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_gt_objects < 1:
            raise ValueError("num_gt_objects must be >= 1")
        for name in ("fpr", "fnr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class CameraModel:
    horizontal_fov: float = math.pi / 2
    image_width: int = 640
    image_height: int = 480
    max_range_m: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.horizontal_fov < math.pi:
            raise ValueError("horizontal_fov must lie in (0, pi)")
        if self.image_width <= 0 or self.image_height <= 0 or self.max_range_m <= 0:
            raise ValueError("camera dimensions and range must be positive")

    def to_dict(self) -> dict:
        return {
            "horizontal_fov": self.horizontal_fov,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "max_range_m": self.max_range_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["horizontal_fov"]), int(d["image_width"]), int(d["image_height"]), float(d["max_range_m"]))


def frame_rng(seed: int, frame_id: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one frame, derived from ``(seed, frame_id)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, frame_id, stream]))


def synth_embedding(
    gt_object_index: int, params: SynthDetectorParams, rng: np.random.Generator
) -> Optional[np.ndarray]:
    """Noisy one-hot embedding for a ground-truth object, or ``None`` on a miss.

    Each of the N bits is flipped independently with probability ``fpr``.
    """
    n = params.num_gt_objects
    if not 0 <= gt_object_index < n:
        raise ValueError(f"gt_object_index {gt_object_index} outside [0, {n})")
    # draw both variates unconditionally so the stream position does not depend on outcomes
    miss = rng.random() < params.fnr
    flips = rng.random(n) < params.fpr
    if miss:
        return None
    ohe = np.zeros(n)
    ohe[gt_object_index] = 1.0
    noisy = np.where(flips, 1.0 - ohe, ohe)
    norm = np.linalg.norm(noisy)
    if norm == 0.0:
        return ohe
    return noisy / norm


def color_histogram(pixels: np.ndarray, bins_per_channel: int = 4) -> np.ndarray:
    """Joint RGB histogram of a crop, flattened and L2-normalized.

    ``pixels`` is any array whose last axis has length 3 with values in
    ``[0, 255]``.
    """
    if bins_per_channel < 2:
        raise ValueError("bins_per_channel must be >= 2")
    px = np.asarray(pixels).reshape(-1, 3)
    if px.shape[0] == 0:
        raise ValueError("empty crop")
    q = np.clip((px.astype(float) * bins_per_channel / 256.0).astype(int), 0, bins_per_channel - 1)
    flat = (q[:, 0] * bins_per_channel + q[:, 1]) * bins_per_channel + q[:, 2]
    hist = np.bincount(flat, minlength=bins_per_channel**3).astype(float)
    return hist / np.linalg.norm(hist)


def bearing_of(det: RawDetection, cam: CameraModel) -> float:
    u_center = 0.5 * (det.bbox[0] + det.bbox[2])
    return (0.5 - u_center / cam.image_width) * cam.horizontal_fov


def project_to_world(det: RawDetection, pose: RobotPose, cam: CameraModel) -> Point:
    """Bearing-plus-range projection of a detection into the map frame."""
    if not 0.0 < det.depth_m <= cam.max_range_m:
        raise ValueError(f"depth {det.depth_m} outside (0, {cam.max_range_m}]")
    heading = pose.theta + bearing_of(det, cam)
    return (pose.x + det.depth_m * math.cos(heading), pose.y + det.depth_m * math.sin(heading))


def bbox_for(bearing: float, depth: float, cam: CameraModel, radius_m: float = 0.1) -> tuple[float, float, float, float]:
    """Sub-pixel box centred on the column that maps back to ``bearing``.

    The half width is shrunk near the image edges so that the box stays
    inside the image without moving its centre.
    """
    u = (0.5 - bearing / cam.horizontal_fov) * cam.image_width
    if not 0.0 < u < cam.image_width:
        raise ValueError("bearing outside the field of view")
    px_per_rad = cam.image_width / cam.horizontal_fov
    half_w = px_per_rad * math.atan2(radius_m, depth)
    half_w = min(half_w, u, cam.image_width - u)
    half_h = min(1.2 * px_per_rad * math.atan2(radius_m, depth), cam.image_height / 2.0)
    v = cam.image_height / 2.0
    return (u - half_w, v - half_h, u + half_w, v + half_h)
