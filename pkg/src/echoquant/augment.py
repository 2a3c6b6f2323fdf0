"""Geometry-consistent augmentation: rotation, centre crop, mild perspective.

All three transforms are folded into one homography that warps the image
(bilinear), the mask (nearest) and the landmarks (exact projective map).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import cv2
import numpy as np

from .exceptions import AugmentationError
from .records import Landmarks

MAX_ROTATION = 15.0
CROP_RANGE = (0.8, 1.0)
PERSPECTIVE_SCALE = 0.1


@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0  # degrees, counter-clockwise on screen
    crop_scale: float = 1.0
    corner_shift: Tuple[Tuple[float, float], ...] = ((0, 0), (0, 0), (0, 0), (0, 0))  # fractions of size

    @property
    def is_identity(self) -> bool:
        return self.angle == 0 and self.crop_scale == 1 and not np.any(self.corner_shift)


def sample_params(rng: np.random.Generator) -> AugmentParams:
    shift = rng.uniform(-PERSPECTIVE_SCALE / 2, PERSPECTIVE_SCALE / 2, size=(4, 2))
    return AugmentParams(angle=float(rng.uniform(-MAX_ROTATION, MAX_ROTATION)),
                         crop_scale=float(rng.uniform(*CROP_RANGE)),
                         corner_shift=tuple(map(tuple, shift.tolist())))


def homography(params: AugmentParams, shape: Tuple[int, int]) -> np.ndarray:
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    a = math.radians(params.angle)
    # y points down, so a screen-counter-clockwise turn uses -a in image axes
    cos, sin = math.cos(a), math.sin(a)
    to_c = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    from_c = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    rot = from_c @ np.array([[cos, sin, 0], [-sin, cos, 0], [0, 0, 1.0]]) @ to_c
    s = 1.0 / params.crop_scale
    crop = from_c @ np.diag([s, s, 1.0]) @ to_c
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    dst = src + np.asarray(params.corner_shift, dtype=np.float64) * [w, h]
    persp = cv2.getPerspectiveTransform(src.astype(np.float32), dst.astype(np.float32))
    return persp @ crop @ rot


def transform_points(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.c_[pts, np.ones(len(pts))] @ H.T
    return hom[:, :2] / hom[:, 2:3]


def apply(params: AugmentParams, image: np.ndarray, mask: np.ndarray, lm: Landmarks):
    """Warp the triple with one homography; returns (image', mask', landmarks')."""
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} disagree")
    if params.is_identity:
        return image.copy(), mask.copy(), lm
    h, w = mask.shape
    H = homography(params, (h, w))
    pts = transform_points(H, lm.to_array())
    if not ((pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)).all():
        raise AugmentationError("landmark leaves the frame")
    img2 = cv2.warpPerspective(image, H, (w, h), flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    mask2 = cv2.warpPerspective(mask, H, (w, h), flags=cv2.INTER_NEAREST,
                                borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return img2, mask2, Landmarks.from_array(pts)


def augment(image: np.ndarray, mask: np.ndarray, lm: Landmarks, rng: np.random.Generator,
            max_tries: int = 10):
    """Random composite warp; redraws when a landmark would leave the frame."""
    for _ in range(max_tries):
        try:
            return apply(sample_params(rng), image, mask, lm)
        except AugmentationError:
            continue
    raise AugmentationError(f"no valid transform in {max_tries} draws")
