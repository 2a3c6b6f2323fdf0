import math

import numpy as np
import pytest

from echoquant.augment import AugmentParams, apply, augment, homography, sample_params, transform_points
from echoquant.exceptions import AugmentationError
from echoquant.heatmap import extract_peak, make_heatmap
from echoquant.records import Landmarks

SIZE = 128
LM = Landmarks((64.0, 30.0), (40.0, 100.0), (88.0, 100.0))


def square_to_quad(dst):
    """Projective map taking the frame corners to ``dst``, solved with plain least squares."""
    src = np.array([[0, 0], [SIZE - 1, 0], [SIZE - 1, SIZE - 1], [0, SIZE - 1]], float)
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    h = np.linalg.solve(np.array(rows), np.array(rhs))
    return np.append(h, 1.0).reshape(3, 3)


def oracle_point(params: AugmentParams, x, y):
    """Rotate about the centre, zoom by 1/crop_scale, then apply the corner perspective."""
    c = (SIZE - 1) / 2
    a = math.radians(params.angle)
    dx, dy = x - c, y - c
    # counter-clockwise on screen with y pointing down
    rx = c + dx * math.cos(a) + dy * math.sin(a)
    ry = c - dx * math.sin(a) + dy * math.cos(a)
    zx = c + (rx - c) / params.crop_scale
    zy = c + (ry - c) / params.crop_scale
    corners = np.array([[0, 0], [SIZE - 1, 0], [SIZE - 1, SIZE - 1], [0, SIZE - 1]], float)
    P = square_to_quad(corners + np.asarray(params.corner_shift) * SIZE)
    u, v, w = P @ [zx, zy, 1.0]
    return u / w, v / w


def test_identity_returns_copies(rng):
    img = rng.integers(0, 255, (SIZE, SIZE), dtype=np.uint8)
    mask = (rng.random((SIZE, SIZE)) > 0.5).astype(np.uint8)
    i2, m2, lm2 = apply(AugmentParams(), img, mask, LM)
    assert np.array_equal(i2, img) and np.array_equal(m2, mask) and lm2 == LM
    assert i2 is not img


def test_pure_rotation_matches_formula():
    p = AugmentParams(angle=12.0)
    H = homography(p, (SIZE, SIZE))
    pts = transform_points(H, LM.to_array())
    for (x, y), (u, v) in zip(LM.to_array(), pts):
        ox, oy = oracle_point(p, x, y)
        assert math.hypot(u - ox, v - oy) <= 1e-9
    # apex above the centre swings to the left for a counter-clockwise turn
    assert pts[0, 0] < LM.P_A[0]


def test_crop_zooms_about_centre():
    H = homography(AugmentParams(crop_scale=0.8), (SIZE, SIZE))
    c = (SIZE - 1) / 2
    np.testing.assert_allclose(transform_points(H, [[c, c], [c + 8, c]]), [[c, c], [c + 10, c]], atol=1e-9)


def test_landmarks_match_independent_composition_200_draws():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        p = sample_params(rng)
        pts = transform_points(homography(p, (SIZE, SIZE)), LM.to_array())
        for (x, y), (u, v) in zip(LM.to_array(), pts):
            ox, oy = oracle_point(p, x, y)
            worst = max(worst, math.hypot(u - ox, v - oy))
    assert worst <= 0.5


def test_warped_heatmap_peak_follows_landmark():
    # the pixels themselves must move where the landmark coordinates go
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = sample_params(rng)
        img = (make_heatmap(LM.P_A, 6.0, (SIZE, SIZE)) * 255).astype(np.uint8)
        try:
            warped, _, lm2 = apply(p, img, np.zeros((SIZE, SIZE), np.uint8), LM)
        except AugmentationError:
            continue
        x, y = extract_peak(warped.astype(float))
        assert math.hypot(x - lm2.P_A[0], y - lm2.P_A[1]) <= 1.0


def test_mask_stays_binary_and_covers_landmark_region(rng):
    mask = np.zeros((SIZE, SIZE), np.uint8)
    mask[40:90, 45:85] = 1
    img = np.full((SIZE, SIZE), 100, np.uint8)
    _, m2, _ = augment(img, mask, LM, rng)
    assert set(np.unique(m2)) <= {0, 1}
    assert 0.5 < m2.sum() / mask.sum() < 2.0


def test_deterministic_given_seed():
    img = np.arange(SIZE * SIZE, dtype=np.uint32).reshape(SIZE, SIZE).astype(np.uint8)
    mask = (img > 100).astype(np.uint8)
    a = augment(img, mask, LM, np.random.default_rng(3))
    b = augment(img, mask, LM, np.random.default_rng(3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]


def test_landmark_leaving_frame_is_rejected():
    edge = Landmarks((1.0, 1.0), (40.0, 100.0), (88.0, 100.0))
    with pytest.raises(AugmentationError):
        apply(AugmentParams(angle=15.0), np.zeros((SIZE, SIZE), np.uint8), np.zeros((SIZE, SIZE), np.uint8), edge)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        apply(AugmentParams(angle=3.0), np.zeros((SIZE, SIZE), np.uint8), np.zeros((64, 64), np.uint8), LM)
