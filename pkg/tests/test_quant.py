import math

import numpy as np
import pytest
from scipy import ndimage

from echoquant.exceptions import DegenerateAxisError, DiskCountMismatchError, EchoQuantError, IncompleteStudyError
from echoquant.phantom import (PhantomParams, analytic_indicators, generate_phantom_study, half_ellipsoid_volume,
                               rasterize_section, random_params)
from echoquant.quant import (diameter_profile, ejection_fraction, long_axis, measure_study, mitral_midpoint,
                             simpson_biplane)
from echoquant.records import DiskProfile, Landmarks, Phase, StudyQuad, View, ViewMask, ViewRecord
from echoquant.exceptions import InvalidLandmarksError


def lm(a, l, r):
    return Landmarks(a, l, r)


class TestMidpointAndAxis:
    def test_midpoint(self):
        assert mitral_midpoint(lm((20, 0), (10, 20), (30, 20))) == (20, 20)
        assert mitral_midpoint(lm((0, 0), (5, 7), (9, 3))) == (7, 5)

    def test_coincident_annulus_rejected(self):
        with pytest.raises(InvalidLandmarksError):
            lm((5, 5), (0, 0), (0, 0))

    def test_apex_on_annulus_rejected(self):
        with pytest.raises(InvalidLandmarksError):
            lm((5, 0), (0, 0), (10, 0))

    def test_axis_aligned(self):
        u, length = long_axis(lm((20, 0), (10, 100), (30, 100)), 0.5)
        np.testing.assert_allclose(u, [0, -1])
        assert length == pytest.approx(50.0)

    def test_vertical_length(self):
        _, length = long_axis(lm((50, 10), (30, 90), (70, 90)), 1.0)
        assert length == pytest.approx(80.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateAxisError):
            long_axis(lm((20.0, 100.5), (10, 100), (30, 100)), 1.0)


def rectangle_mask(width=40, top=20, bottom=200, size=256, spacing=1.0):
    grid = np.zeros((size, size), np.uint8)
    left = size // 2 - width // 2
    grid[top:bottom, left:left + width] = 1
    center = (left + left + width - 1) / 2
    return ViewMask(grid, View.A4C, Phase.ED, spacing), center


class TestDiameterProfile:
    def test_constant_width(self):
        mask, cx = rectangle_mask()
        # annulus and apex well inside the rectangle
        lmk = lm((cx, 30.0), (cx - 10, 190.0), (cx + 10, 190.0))
        for n in (1, 7, 20):
            prof = diameter_profile(mask, lmk, n)
            np.testing.assert_allclose(prof.diameters, 40.0, atol=1e-9)

    def test_trailing_zero_when_apex_outside(self):
        mask, cx = rectangle_mask(top=120)
        # axis extends to y=30 but the mask stops at y=120
        lmk = lm((cx, 30.0), (cx - 10, 190.0), (cx + 10, 190.0))
        prof = diameter_profile(mask, lmk, 20)
        d = np.array(prof.diameters)
        assert d[0] == pytest.approx(40.0)
        assert (d[-5:] == 0).all()

    def test_half_ellipse_against_analytic_chords(self):
        # oracle: chord of a half-ellipse at height z is D * sqrt(1 - (z/L)^2)
        spacing = 0.5
        params = PhantomParams(L_ed=80, L_es=70, D4_ed=48, D4_es=36, D2_ed=48, D2_es=36,
                               spacing_mm=spacing, tilt=0.0, noise=0.0)
        grid, lmk = rasterize_section(80.0, 48.0, params)
        mask = ViewMask(grid, View.A4C, Phase.ED, spacing)
        n = 20
        prof = diameter_profile(mask, lmk, n)
        z = (np.arange(n) + 0.5) / n * 80.0
        expected = 48.0 * np.sqrt(1 - (z / 80.0) ** 2)
        np.testing.assert_allclose(prof.diameters, expected, atol=2 * spacing)
        assert prof.axis_length == pytest.approx(80.0)

    def test_out_of_grid_landmark(self):
        mask, cx = rectangle_mask()
        with pytest.raises(EchoQuantError):
            diameter_profile(mask, lm((cx, -3.0), (cx - 10, 190.0), (cx + 10, 190.0)), 5)


class TestSimpson:
    def test_empty(self):
        p = DiskProfile((0.0,) * 20, 80.0, 20)
        assert simpson_biplane(p, p) == 0.0

    def test_mismatch(self):
        with pytest.raises(DiskCountMismatchError):
            simpson_biplane(DiskProfile((1.0,) * 3, 10, 3), DiskProfile((1.0,) * 4, 10, 4))

    def test_formula(self):
        a = DiskProfile((10.0, 20.0), 40.0, 2)
        b = DiskProfile((30.0, 10.0), 50.0, 2)
        assert simpson_biplane(a, b) == pytest.approx(math.pi / 4 * 25.0 * (300 + 200) / 1000)

    def test_half_ellipsoid_volume(self):
        assert half_ellipsoid_volume(80, 48, 48) == pytest.approx(96.509, abs=1e-3)
        params = PhantomParams(L_ed=80, L_es=70, D4_ed=48, D4_es=36, D2_ed=48, D2_es=36,
                               spacing_mm=0.5, noise=0.0)
        study, truth = generate_phantom_study(params)
        got = measure_study(study, 20)
        assert got.EDV == pytest.approx(truth.EDV, rel=0.03)
        assert truth.EDV == pytest.approx(96.5, abs=0.05)

    def test_spacing_scales_volume_cubically(self):
        params = PhantomParams(noise=0.0)
        study, _ = generate_phantom_study(params)
        doubled = StudyQuad(study.study_id, {
            k: ViewRecord(ViewMask(r.mask.grid, r.mask.view, r.mask.phase, 2 * r.mask.spacing_mm), r.landmarks)
            for k, r in study})
        a, b = measure_study(study), measure_study(doubled)
        assert b.EDV == pytest.approx(8 * a.EDV, rel=1e-12)
        assert b.EDL == pytest.approx(2 * a.EDL, rel=1e-12)


class TestEjectionFraction:
    def test_values(self):
        assert ejection_fraction(120, 48) == pytest.approx(60.0)
        assert ejection_fraction(77.0, 77.0) == 0.0
        assert ejection_fraction(100, 0) == 100.0

    def test_nonpositive_edv(self):
        with pytest.raises(EchoQuantError):
            ejection_fraction(0.0, 0.0)


class TestMeasureStudy:
    def test_identical_phases_zero_ef(self):
        study, _ = generate_phantom_study(PhantomParams(noise=0.0))
        same = StudyQuad("s", {(v, p): ViewRecord(
            ViewMask(study[v, Phase.ED].mask.grid, v, p, study[v, Phase.ED].mask.spacing_mm),
            study[v, Phase.ED].landmarks) for v in View for p in Phase})
        assert measure_study(same).EF == 0.0

    def test_prescribed_volumes(self):
        from echoquant.phantom import params_from_volumes
        params = params_from_volumes(120.0, 48.0, spacing_mm=0.55, noise=0.0)
        study, truth = generate_phantom_study(params)
        assert truth.EF == pytest.approx(60.0)
        assert measure_study(study).EF == pytest.approx(60.0, abs=3.0)

    def test_missing_view_named(self):
        study, _ = generate_phantom_study(PhantomParams(noise=0.0))
        partial = StudyQuad("p", {k: r for k, r in study if k != (View.A2C, Phase.ES)})
        with pytest.raises(IncompleteStudyError, match="A2C/ES"):
            measure_study(partial)

    def test_error_annotated_with_view(self):
        study, _ = generate_phantom_study(PhantomParams(noise=0.0))
        recs = dict(study.records)
        r = recs[(View.A2C, Phase.ED)]
        m = mitral_midpoint(r.landmarks)
        bad = Landmarks((m[0] + 0.3, m[1] + 0.3), r.landmarks.P_L, r.landmarks.P_R)
        recs[(View.A2C, Phase.ED)] = ViewRecord(r.mask, bad)
        with pytest.raises(DegenerateAxisError, match="A2C/ED"):
            measure_study(StudyQuad("d", recs))

    def test_ef_identity_and_purity(self, rng):
        for _ in range(5):
            study, _ = generate_phantom_study(random_params(rng))
            a = measure_study(study)
            b = measure_study(study)
            assert a == b
            assert a.EF == 100.0 * (a.EDV - a.ESV) / a.EDV


class TestProperties:
    def test_rotation_equivariance(self, rng):
        for _ in range(4):
            params = random_params(rng, tilt_range=0.0)
            base = measure_study(generate_phantom_study(params)[0])
            for tilt in (-20.0, 12.5, 33.0):
                from dataclasses import replace
                rot = measure_study(generate_phantom_study(replace(params, tilt=tilt))[0])
                for f in ("EDV", "ESV", "EDL", "ESL"):
                    assert getattr(rot, f) == pytest.approx(getattr(base, f), rel=0.01)
                assert abs(rot.EF - base.EF) <= 0.5

    def test_exact_rot90_equivariance(self):
        study, _ = generate_phantom_study(PhantomParams(noise=0.0, tilt=7.0))
        n = study[View.A4C, Phase.ED].mask.shape[0]
        recs = {}
        for k, r in study:
            # rot90 counter-clockwise: (x, y) -> (y, n-1-x)
            pts = r.landmarks.to_array()
            new = np.c_[pts[:, 1], n - 1 - pts[:, 0]]
            recs[k] = ViewRecord(ViewMask(np.rot90(r.mask.grid), r.mask.view, r.mask.phase, r.mask.spacing_mm),
                                 Landmarks.from_array(new))
        a, b = measure_study(study), measure_study(StudyQuad("r", recs))
        for f in ("EDV", "ESV", "EDL", "ESL", "EF"):
            assert getattr(b, f) == pytest.approx(getattr(a, f), rel=1e-9, abs=1e-9)

    def test_dilation_monotone(self, rng):
        for _ in range(5):
            study, _ = generate_phantom_study(random_params(rng))
            for (v, p), r in study:
                d0 = diameter_profile(r.mask, r.landmarks, 20)
                grown = ndimage.binary_dilation(r.mask.grid).astype(np.uint8)
                d1 = diameter_profile(ViewMask(grown, v, p, r.mask.spacing_mm), r.landmarks, 20)
                assert all(b >= a for a, b in zip(d0.diameters, d1.diameters))

    def test_disk_convergence(self, rng):
        for _ in range(10):
            study, truth = generate_phantom_study(random_params(rng))
            e10 = abs(measure_study(study, 10).EDV - truth.EDV) / truth.EDV
            e40 = abs(measure_study(study, 40).EDV - truth.EDV) / truth.EDV
            assert e40 <= e10 + 0.02

    def test_notched_shape_against_fine_voxelization(self):
        # oracle: biplane volume from chords of the continuous implicit shape, sampled finely
        from echoquant.phantom import cavity_geometry, inside_cavity
        params = PhantomParams(notch_depth=0.5, noise=0.0, tilt=10.0)
        study, _ = generate_phantom_study(params)
        est = measure_study(study, 20)

        def oracle_volume(length, d4, d2):
            profs = []
            for diam, side in ((d4, 1), (d2, -1)):
                lp, dp = length / params.spacing_mm, diam / params.spacing_mm
                base, axis = cavity_geometry(params.L_ed / params.spacing_mm, dp, params.tilt, params.size)
                normal = np.array([-axis[1], axis[0]])
                t = (np.arange(20) + 0.5) / 20 * lp
                s = np.linspace(-dp, dp, 40001)
                chords = []
                for ti in t:
                    c = base + ti * axis
                    pts = c[None] + s[:, None] * normal[None]
                    ins = inside_cavity(pts[:, 0], pts[:, 1], base, axis, lp, dp, params.notch_depth, side)
                    mid = len(s) // 2
                    if not ins[mid]:
                        chords.append(0.0)
                        continue
                    r = mid + np.argmin(ins[mid:])
                    l = mid - np.argmin(ins[mid::-1])
                    chords.append((s[r - 1] - s[l + 1]) * params.spacing_mm)
                profs.append(DiskProfile(tuple(chords), length, 20))
            return simpson_biplane(*profs)

        edv = oracle_volume(params.L_ed, params.D4_ed, params.D2_ed)
        esv = oracle_volume(params.L_es, params.D4_es, params.D2_es)
        assert est.EDV == pytest.approx(edv, rel=0.03)
        assert est.ESV == pytest.approx(esv, rel=0.03)
        # the notch must actually bite
        assert edv < 0.97 * analytic_indicators(params).EDV
