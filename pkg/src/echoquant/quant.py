"""Biplane method-of-disks measurement: masks + landmarks -> LV indicators.

Every function here is pure; inputs are immutable records.
"""
from __future__ import annotations

import math
from typing import Tuple

import numpy as np
from scipy import ndimage

from .exceptions import DegenerateAxisError, DiskCountMismatchError, EchoQuantError
from .records import DiskProfile, Landmarks, LVIndicators, Phase, StudyQuad, View, ViewMask

DEFAULT_N_DISKS = 20
_SAMPLE_STEP = 0.25  # px, spacing of samples along each chord line
_LEVEL = 0.5


def mitral_midpoint(lm: Landmarks) -> Tuple[float, float]:
    return ((lm.P_L[0] + lm.P_R[0]) / 2.0, (lm.P_L[1] + lm.P_R[1]) / 2.0)


def long_axis(lm: Landmarks, spacing_mm: float) -> Tuple[np.ndarray, float]:
    """Unit vector from the mitral midpoint toward the apex, and axis length in mm."""
    if not spacing_mm > 0:
        raise ValueError(f"spacing_mm must be positive, got {spacing_mm}")
    m = np.asarray(mitral_midpoint(lm))
    vec = np.asarray(lm.P_A) - m
    norm = float(np.hypot(vec[0], vec[1]))
    if norm < 1.0:
        raise DegenerateAxisError(f"apex is {norm:.3g} px from the mitral midpoint (need >= 1 px)")
    return vec / norm, norm * spacing_mm


def _chord_lengths(grid: np.ndarray, centers: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Length in px of the run of mask containing each center along ``normal``.

    The mask is bilinearly interpolated and thresholded at 0.5; run endpoints
    are located by linear interpolation between the bracketing samples.
    """
    h, w = grid.shape
    half = int(math.ceil(math.hypot(h, w) / _SAMPLE_STEP)) + 2
    s = np.arange(-half, half + 1) * _SAMPLE_STEP
    xs = centers[:, 0, None] + s[None, :] * normal[0]
    ys = centers[:, 1, None] + s[None, :] * normal[1]
    vals = ndimage.map_coordinates(grid.astype(np.float64), [ys.ravel(), xs.ravel()],
                                   order=1, mode="constant", cval=0.0).reshape(xs.shape)
    inside = vals >= _LEVEL
    out = np.zeros(len(centers))
    for i in range(len(centers)):
        if not inside[i, half]:
            continue
        ext = []
        for direction in (1, -1):
            row = inside[i, half::direction]
            v = vals[i, half::direction]
            j = int(np.argmin(row))  # first outside sample; cval=0 guarantees one
            frac = (v[j - 1] - _LEVEL) / (v[j - 1] - v[j])
            ext.append((j - 1 + frac) * _SAMPLE_STEP)
        out[i] = ext[0] + ext[1]
    return out


def diameter_profile(mask: ViewMask, lm: Landmarks, n_disks: int = DEFAULT_N_DISKS) -> DiskProfile:
    """Chord diameters (mm) at the midpoints of ``n_disks`` equal slices, base to apex."""
    if n_disks < 1:
        raise ValueError(f"n_disks must be >= 1, got {n_disks}")
    lm.check_inside(mask.shape)
    axis, length_mm = long_axis(lm, mask.spacing_mm)
    length_px = length_mm / mask.spacing_mm
    m = np.asarray(mitral_midpoint(lm))
    t = (np.arange(n_disks) + 0.5) / n_disks * length_px
    centers = m[None, :] + t[:, None] * axis[None, :]
    normal = np.array([-axis[1], axis[0]])
    chords = _chord_lengths(mask.grid, centers, normal)
    return DiskProfile(tuple(chords * mask.spacing_mm), length_mm, n_disks)


def simpson_biplane(prof_a4c: DiskProfile, prof_a2c: DiskProfile) -> float:
    """Volume in mL from paired orthogonal diameter profiles."""
    if prof_a4c.n_disks != prof_a2c.n_disks:
        raise DiskCountMismatchError(
            f"A4C has {prof_a4c.n_disks} disks, A2C has {prof_a2c.n_disks}")
    n = prof_a4c.n_disks
    length = max(prof_a4c.axis_length, prof_a2c.axis_length)
    a = np.asarray(prof_a4c.diameters)
    b = np.asarray(prof_a2c.diameters)
    return float(math.pi / 4.0 * (length / n) * np.sum(a * b) / 1000.0)


def ejection_fraction(edv: float, esv: float) -> float:
    if not edv > 0:
        raise EchoQuantError(f"EDV must be positive, got {edv}")
    if esv < 0:
        raise EchoQuantError(f"ESV must be nonnegative, got {esv}")
    return 100.0 * (edv - esv) / edv


def measure_study(study: StudyQuad, n_disks: int = DEFAULT_N_DISKS) -> LVIndicators:
    study.check_complete()
    lengths = {}
    volumes = {}
    for phase in Phase:
        profiles = {}
        for view in View:
            rec = study[view, phase]
            try:
                profiles[view] = diameter_profile(rec.mask, rec.landmarks, n_disks)
            except EchoQuantError as exc:
                raise type(exc)(f"{study.study_id} {view.value}/{phase.value}: {exc}") from exc
        lengths[phase] = max(p.axis_length for p in profiles.values())
        volumes[phase] = simpson_biplane(profiles[View.A4C], profiles[View.A2C])
    try:
        ef = ejection_fraction(volumes[Phase.ED], volumes[Phase.ES])
    except EchoQuantError as exc:
        raise type(exc)(f"{study.study_id}: {exc}") from exc
    return LVIndicators(lengths[Phase.ED], lengths[Phase.ES],
                        volumes[Phase.ED], volumes[Phase.ES], ef)
