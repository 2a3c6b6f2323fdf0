"""Synthetic apical-view phantoms with closed-form LV volumes.

Each cavity is a half-ellipse in the imaging plane: long axis ``L`` from the
mitral midpoint to the apex, basal diameter ``D``.  Pairing the A4C and A2C
sections gives a half-ellipsoid whose volume is ``pi * L * D4 * D2 / 6``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import InvalidParamsError
from .quant import ejection_fraction
from .records import Landmarks, LVIndicators, Phase, StudyQuad, View, ViewMask, ViewRecord

IMAGE_SIZE = 256


@dataclass(frozen=True)
class PhantomParams:
    L_ed: float = 80.0
    L_es: float = 70.0
    D4_ed: float = 48.0
    D4_es: float = 36.0
    D2_ed: float = 48.0
    D2_es: float = 36.0
    spacing_mm: float = 0.5
    tilt: float = 0.0
    noise: float = 0.3
    seed: int = 0
    notch_depth: float = 0.0  # fraction of the local half-width removed by the notch
    size: int = IMAGE_SIZE

    def validate(self) -> None:
        dims = (self.L_ed, self.L_es, self.D4_ed, self.D4_es, self.D2_ed, self.D2_es)
        if not all(math.isfinite(v) and v > 0 for v in dims):
            raise InvalidParamsError(f"all lengths must be positive: {dims}")
        if self.L_es > self.L_ed or self.D4_es > self.D4_ed or self.D2_es > self.D2_ed:
            raise InvalidParamsError("ES dimensions must not exceed ED dimensions")
        if not self.spacing_mm > 0:
            raise InvalidParamsError("spacing_mm must be positive")
        if not 0.0 <= self.noise <= 1.0:
            raise InvalidParamsError("noise must lie in [0, 1]")
        if not 0.0 <= self.notch_depth < 1.0:
            raise InvalidParamsError("notch_depth must lie in [0, 1)")
        ef = analytic_indicators(self).EF
        if not 0.0 < ef < 100.0:
            raise InvalidParamsError(f"analytic EF {ef:.3f} outside (0, 100)")
        # the widest extent of the cavity (plus rim) must fit in the frame
        reach = math.hypot(self.L_ed / 2, max(self.D4_ed, self.D2_ed) / 2) / self.spacing_mm
        if reach + 8 > self.size / 2:
            raise InvalidParamsError(
                f"cavity reaches {reach:.1f} px from the center; frame half-size is {self.size / 2}")


def half_ellipsoid_volume(length_mm: float, d_a: float, d_b: float) -> float:
    """Closed-form half-ellipsoid volume in mL."""
    return math.pi * length_mm * d_a * d_b / 6.0 / 1000.0


def analytic_indicators(params: PhantomParams) -> LVIndicators:
    edv = half_ellipsoid_volume(params.L_ed, params.D4_ed, params.D2_ed)
    esv = half_ellipsoid_volume(params.L_es, params.D4_es, params.D2_es)
    return LVIndicators(params.L_ed, params.L_es, edv, esv, ejection_fraction(edv, esv))


def params_from_volumes(edv: float, esv: float, L_ed: float = 85.0, L_es: float = 75.0,
                        **kwargs) -> PhantomParams:
    """Solve circular basal diameters so the phantom hits the prescribed volumes."""
    d_ed = math.sqrt(6000.0 * edv / (math.pi * L_ed))
    d_es = math.sqrt(6000.0 * esv / (math.pi * L_es))
    return PhantomParams(L_ed=L_ed, L_es=L_es, D4_ed=d_ed, D4_es=d_es,
                         D2_ed=d_ed, D2_es=d_es, **kwargs)


def random_params(rng: np.random.Generator, noise: Optional[float] = None,
                  tilt_range: float = 15.0) -> PhantomParams:
    """Draw physiologically flavoured phantom dimensions."""
    L_ed = rng.uniform(75.0, 95.0)
    L_es = L_ed * rng.uniform(0.82, 0.95)
    D4_ed = rng.uniform(40.0, 54.0)
    D2_ed = D4_ed * rng.uniform(0.9, 1.1)
    shrink = rng.uniform(0.6, 0.88)
    D4_es = D4_ed * shrink * rng.uniform(0.95, 1.0)
    D2_es = D2_ed * shrink * rng.uniform(0.95, 1.0)
    spacing = L_ed / rng.uniform(140.0, 165.0)
    return PhantomParams(
        L_ed=L_ed, L_es=L_es, D4_ed=D4_ed, D4_es=D4_es, D2_ed=D2_ed, D2_es=D2_es,
        spacing_mm=spacing, tilt=rng.uniform(-tilt_range, tilt_range),
        noise=rng.uniform(0.2, 0.5) if noise is None else noise,
        seed=int(rng.integers(0, 2**31 - 1)))


def notch_profile(u: np.ndarray, depth: float) -> np.ndarray:
    """Fraction of the half-width kept at relative axial position ``u`` in [0, 1]."""
    return 1.0 - depth * np.exp(-0.5 * ((u - 0.45) / 0.06) ** 2)


def cavity_geometry(length_px: float, diameter_px: float, tilt_deg: float, size: int):
    """Frame placement of one section: returns (mitral midpoint, axis unit vector)."""
    theta = math.radians(tilt_deg)
    axis = np.array([math.sin(theta), -math.cos(theta)])
    center = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    base_mid = center - axis * length_px / 2.0
    return base_mid, axis


def inside_cavity(x, y, base_mid, axis, length_px, diameter_px, notch_depth=0.0, side=0):
    """Implicit membership test in continuous pixel coordinates.

    ``side`` selects which half-width the notch indents: +1, -1, or 0 for none.
    """
    normal = np.array([-axis[1], axis[0]])
    dx = np.asarray(x, dtype=float) - base_mid[0]
    dy = np.asarray(y, dtype=float) - base_mid[1]
    u = dx * axis[0] + dy * axis[1]
    v = dx * normal[0] + dy * normal[1]
    t = u / length_px
    half = diameter_px / 2.0 * np.sqrt(np.clip(1.0 - t**2, 0.0, None))
    inside = (t >= 0) & (t <= 1)
    if notch_depth > 0 and side != 0:
        notched = half * notch_profile(t, notch_depth)
        on_side = np.sign(v) == side
        limit = np.where(on_side, notched, half)
        return inside & (np.abs(v) <= limit)
    return inside & (np.abs(v) <= half)


def rasterize_section(length_mm: float, diameter_mm: float, params: PhantomParams,
                      notch_side: int = 0) -> Tuple[np.ndarray, Landmarks]:
    """Binary mask sampled at pixel centers plus the analytic landmarks."""
    size = params.size
    length_px = length_mm / params.spacing_mm
    diam_px = diameter_mm / params.spacing_mm
    # ED and ES share the basal plane position so the annulus stays put across phases
    base_mid, axis = cavity_geometry(params.L_ed / params.spacing_mm, diam_px, params.tilt, size)
    yy, xx = np.mgrid[0:size, 0:size]
    grid = inside_cavity(xx, yy, base_mid, axis, length_px, diam_px,
                         params.notch_depth, notch_side).astype(np.uint8)
    normal = np.array([-axis[1], axis[0]])
    apex = base_mid + axis * length_px
    p_l = base_mid - normal * diam_px / 2.0
    p_r = base_mid + normal * diam_px / 2.0
    return grid, Landmarks(tuple(apex), tuple(p_l), tuple(p_r))


def render_image(mask: np.ndarray, rng: np.random.Generator, noise: float,
                 rim_px: int = 6) -> np.ndarray:
    """Mask-conditioned texture: dark cavity, bright rim, speckle, blur. Returns uint8."""
    mask = mask.astype(bool)
    rim = ndimage.binary_dilation(mask, iterations=rim_px) & ~mask
    img = np.full(mask.shape, 0.35)
    img[rim] = 0.85
    img[mask] = 0.08
    speckle = rng.gamma(shape=1.0 / max(noise, 1e-3) ** 2, scale=max(noise, 1e-3) ** 2,
                        size=mask.shape) if noise > 0 else 1.0
    img = ndimage.gaussian_filter(img * speckle, sigma=1.0)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def generate_phantom_study(params: PhantomParams, study_id: Optional[str] = None
                           ) -> Tuple[StudyQuad, LVIndicators]:
    params.validate()
    rng = np.random.default_rng(params.seed)
    dims = {
        (View.A4C, Phase.ED): (params.L_ed, params.D4_ed),
        (View.A4C, Phase.ES): (params.L_es, params.D4_es),
        (View.A2C, Phase.ED): (params.L_ed, params.D2_ed),
        (View.A2C, Phase.ES): (params.L_es, params.D2_es),
    }
    records = {}
    for (view, phase), (length, diam) in dims.items():
        side = (1 if view is View.A4C else -1) if params.notch_depth > 0 else 0
        grid, lm = rasterize_section(length, diam, params, notch_side=side)
        image = render_image(grid, rng, params.noise)
        mask = ViewMask(grid, view, phase, params.spacing_mm)
        records[(view, phase)] = ViewRecord(mask, lm, image)
    sid = study_id if study_id is not None else f"phantom_{params.seed}"
    return StudyQuad(sid, records), analytic_indicators(params)


def generate_phantom_set(n: int, seed: int, noise: Optional[float] = None, prefix: str = "phantom"):
    """``n`` random studies with their analytic indicators, a pure function of ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        params = random_params(rng, noise=noise)
        out.append((generate_phantom_study(params, f"{prefix}_{i:04d}") + (params,)))
    return out


def params_to_dict(params: PhantomParams) -> dict:
    return asdict(params)


def with_tilt(params: PhantomParams, tilt: float) -> PhantomParams:
    return replace(params, tilt=tilt)
