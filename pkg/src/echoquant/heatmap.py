"""Gaussian landmark heatmaps, peak decoding, sigma annealing and PCK."""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
import torch

from .exceptions import ConstantMapError, InvalidEpochError, OutOfGridError, ShapeMismatchError
from .records import Landmarks

SIGMA_START = 20.0
SIGMA_END = 10.0


def make_heatmap(point: Tuple[float, float], sigma_px: float, shape: Tuple[int, int]) -> np.ndarray:
    """Amplitude-1 Gaussian centred on ``point`` = (x, y)."""
    if not sigma_px > 0:
        raise ValueError(f"sigma_px must be positive, got {sigma_px}")
    h, w = shape
    x, y = point
    if not (0 <= x < w and 0 <= y < h):
        raise OutOfGridError(f"point {(x, y)} outside a {h}x{w} grid")
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    gx = np.exp(-((cols - x) ** 2) / (2.0 * sigma_px**2))
    gy = np.exp(-((rows - y) ** 2) / (2.0 * sigma_px**2))
    return gy[:, None] * gx[None, :]


def make_heatmaps(lm: Landmarks, sigma_px: float, shape: Tuple[int, int]) -> np.ndarray:
    """Three-channel stack in P_A, P_L, P_R order."""
    return np.stack([make_heatmap(p, sigma_px, shape) for p in lm.to_array()])


def render_heatmaps(points: torch.Tensor, sigma_px: float, shape: Tuple[int, int]) -> torch.Tensor:
    """Batched torch version: ``points`` (B, K, 2) -> (B, K, H, W)."""
    h, w = shape
    cols = torch.arange(w, dtype=points.dtype, device=points.device)
    rows = torch.arange(h, dtype=points.dtype, device=points.device)
    gx = torch.exp(-((cols[None, None, :] - points[..., 0:1]) ** 2) / (2.0 * sigma_px**2))
    gy = torch.exp(-((rows[None, None, :] - points[..., 1:2]) ** 2) / (2.0 * sigma_px**2))
    return gy[..., :, None] * gx[..., None, :]


def sigma_schedule(epoch: int, warmup_epochs: int, total_epochs: int,
                   start: float = SIGMA_START, end: float = SIGMA_END) -> float:
    """Constant ``start`` through warm-up, then linear to ``end`` at the last epoch."""
    if not 0 <= epoch < total_epochs:
        raise InvalidEpochError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < warmup_epochs:
        return float(start)
    span = total_epochs - 1 - warmup_epochs
    if span <= 0:
        return float(end)
    frac = (epoch - warmup_epochs) / span
    return float(start + (end - start) * frac)


def _refine(fm: float, f0: float, fp: float, clamp: float = 0.5) -> float:
    denom = fm - 2.0 * f0 + fp
    if denom >= 0:  # not a strict local maximum along this axis
        return float("nan")
    return float(np.clip(0.5 * (fm - fp) / denom, -clamp, clamp))


def extract_peak(hmap: np.ndarray) -> Tuple[float, float]:
    """Argmax with a per-axis three-point quadratic refinement, returned as (x, y)."""
    hmap = np.asarray(hmap, dtype=np.float64)
    if hmap.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D map, got shape {hmap.shape}")
    if not np.isfinite(hmap).all() or np.ptp(hmap) == 0:
        raise ConstantMapError("heatmap is constant or non-finite; no peak to extract")
    h, w = hmap.shape
    r, c = np.unravel_index(int(np.argmax(hmap)), hmap.shape)
    return (c + _axis_offset(hmap[r, :], c), r + _axis_offset(hmap[:, c], r))


def _axis_offset(line: np.ndarray, i: int) -> float:
    n = len(line)
    if n < 3:
        return 0.0
    if 0 < i < n - 1:
        d = _refine(line[i - 1], line[i], line[i + 1])
        return 0.0 if np.isnan(d) else d
    # border maximum: fit the inner window and keep the vertex on the grid side
    j = 1 if i == 0 else n - 2
    d = (j - i) + _refine(line[j - 1], line[j], line[j + 1], clamp=1.5)
    if np.isnan(d):
        return 0.0
    return float(np.clip(d, 0.0, 0.5) if i == 0 else np.clip(d, -0.5, 0.0))


def extract_landmarks(maps: np.ndarray) -> Landmarks:
    """Decode a (3, H, W) stack into landmarks."""
    pts = [extract_peak(m) for m in np.asarray(maps)]
    return Landmarks(*pts)


def pck(pred: Sequence[Landmarks], gt: Sequence[Landmarks], input_size: int) -> float:
    """Fraction of landmarks within ``input_size / 20`` px (inclusive) of ground truth."""
    if len(pred) != len(gt):
        raise ShapeMismatchError(f"{len(pred)} predictions for {len(gt)} ground truths")
    if input_size <= 0:
        raise ValueError("input_size must be positive")
    if not pred:
        return float("nan")
    p = np.stack([lm.to_array() for lm in pred])
    g = np.stack([lm.to_array() for lm in gt])
    err = np.hypot(p[..., 0] - g[..., 0], p[..., 1] - g[..., 1])
    # tiny slack absorbs rounding when an offset is exactly the threshold
    thr = input_size / 20.0
    return float(np.mean(err <= thr * (1 + 1e-12)))
