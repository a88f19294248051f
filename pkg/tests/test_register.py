import math

import numpy as np
import pytest

from errors import DegenerateConfigurationError, EmptyOverlapError, ShapeMismatchError
from imgio import IrImage, SdrImage
from register import (
    CorrespondenceSet,
    Homography,
    estimate_homography,
    largest_valid_rectangle,
    load_correspondences,
    load_homography,
    overlap_crop,
    register_pair,
    reprojection_rmse,
    save_correspondences,
    save_homography,
    warp_image,
)

SQUARE = np.array([[0.0, 0.0], [40.0, 0.0], [40.0, 30.0], [0.0, 30.0]])


def _pairs(h: Homography, source: np.ndarray) -> CorrespondenceSet:
    return CorrespondenceSet(np.hstack([source, h.apply(source)]))


def _rotation_about(cx: float, cy: float, degrees: float) -> Homography:
    a = math.radians(degrees)
    rotate = Homography(np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]]))
    return Homography.translation(cx, cy) @ rotate @ Homography.translation(-cx, -cy)


def _brute_force_largest_area(mask: np.ndarray) -> int:
    rows, cols = mask.shape
    best = 0
    for top in range(rows):
        columns = np.ones(cols, dtype=bool)
        for bottom in range(top, rows):
            columns &= mask[bottom]
            run = longest = 0
            for ok in columns:
                run = run + 1 if ok else 0
                longest = max(longest, run)
            best = max(best, longest * (bottom - top + 1))
    return best


def test_self_pairs_give_identity() -> None:
    h = estimate_homography(_pairs(Homography.identity(), SQUARE))
    assert np.allclose(h.m, np.eye(3), atol=1e-9)
    assert h.rmse == pytest.approx(0.0, abs=1e-9)


def test_pure_translation() -> None:
    h = estimate_homography(_pairs(Homography.translation(5, -3), SQUARE))
    assert np.allclose(h.m, [[1, 0, 5], [0, 1, -3], [0, 0, 1]], atol=1e-9)


def test_recovers_random_homography_from_eight_pairs(rng) -> None:
    truth = Homography(np.array([[1.05, 0.02, 3.0], [-0.01, 0.98, -2.0], [1e-4, -5e-5, 1.0]]))
    source = rng.uniform(0, 100, (8, 2))
    h = estimate_homography(_pairs(truth, source))
    assert np.allclose(h.m, truth.m, atol=1e-6)


def test_refinement_never_increases_error(rng) -> None:
    truth = Homography(np.array([[0.97, 0.05, -4.0], [0.03, 1.02, 6.0], [5e-5, 2e-5, 1.0]]))
    source = rng.uniform(0, 120, (12, 2))
    pairs = np.hstack([source, truth.apply(source) + rng.normal(0, 0.3, (12, 2))])
    c = CorrespondenceSet(pairs)
    h = estimate_homography(c)
    assert h.rmse == pytest.approx(reprojection_rmse(h, c))
    assert h.rmse < 1.0


def test_correspondence_validation() -> None:
    with pytest.raises(DegenerateConfigurationError):
        CorrespondenceSet(np.zeros((3, 4)))
    collinear = np.array([[0, 0, 0, 0], [1, 1, 1, 1], [2, 2, 2, 2], [0, 5, 0, 5]], dtype=float)
    with pytest.raises(DegenerateConfigurationError):
        CorrespondenceSet(collinear)


def test_homography_algebra(rng) -> None:
    a = Homography.translation(2, 3)
    b = _rotation_about(10, 10, 30)
    points = rng.uniform(0, 20, (5, 2))
    assert np.allclose((a @ b).apply(points), a.apply(b.apply(points)))
    assert np.allclose(b.inverse().apply(b.apply(points)), points)
    with pytest.raises(DegenerateConfigurationError):
        Homography(np.zeros((3, 3)))


def test_identity_warp_returns_input(rng) -> None:
    data = rng.uniform(0, 1, (12, 9))
    warped, validity = warp_image(data, Homography.identity(), 9, 12)
    assert np.allclose(warped, data)
    assert validity.all()


def test_translation_warp_shifts_columns(rng) -> None:
    data = rng.uniform(0, 1, (8, 30))
    warped, validity = warp_image(data, Homography.translation(10, 0), 30, 8)
    assert np.allclose(warped[:, 10:], data[:, :-10])
    assert not validity[:, :10].any()
    assert validity[:, 10:].all()
    assert not warped[:, :10].any()


def test_ir_warp_fills_with_calibration_minimum() -> None:
    ir = IrImage(np.full((6, 6), 30.0), -20.0, 100.0)
    warped, validity = warp_image(ir, Homography.translation(3, 0), 6, 6)
    assert np.all(warped.data[:, :3] == -20.0)
    assert np.allclose(warped.data[validity], 30.0)


def test_overlap_crop_full_and_half_masks() -> None:
    rgb = SdrImage(np.zeros((10, 16, 3), dtype=np.uint8))
    ir = IrImage(np.zeros((10, 16)))
    full = np.ones((10, 16), dtype=bool)
    rgb_crop, ir_crop = overlap_crop(rgb, ir, full)
    assert (rgb_crop.width, rgb_crop.height) == (16, 10)
    half = full.copy()
    half[:, 8:] = False
    rgb_crop, ir_crop = overlap_crop(rgb, ir, half)
    assert rgb_crop.width == ir_crop.width == 8


def test_overlap_crop_errors() -> None:
    rgb = SdrImage(np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(EmptyOverlapError):
        overlap_crop(rgb, IrImage(np.zeros((4, 4))), np.zeros((4, 4), dtype=bool))
    with pytest.raises(ShapeMismatchError):
        overlap_crop(rgb, IrImage(np.zeros((4, 5))), np.ones((4, 5), dtype=bool))


def test_rotated_overlap_rectangle_is_maximal() -> None:
    _, validity = warp_image(np.ones((64, 64)), _rotation_about(31.5, 31.5, 12), 64, 64)
    top, left, height, width = largest_valid_rectangle(validity)
    assert validity[top:top + height, left:left + width].all()
    assert height * width == _brute_force_largest_area(validity)


def test_register_pair_recovers_known_offset() -> None:
    truth = Homography.translation(4, 2)
    temps = np.add.outer(np.arange(24.0), np.arange(32.0))
    ir = IrImage(temps)
    rgb = SdrImage(np.zeros((24, 32, 3), dtype=np.uint8))
    source = np.array([[2, 2], [28, 3], [27, 20], [3, 21], [15, 11]], dtype=float)
    rgb_crop, ir_crop, h = register_pair(rgb, ir, _pairs(truth, source))
    assert np.allclose(h.m, truth.m, atol=1e-9)
    assert (rgb_crop.width, rgb_crop.height) == (28, 22)
    assert ir_crop.data[0, 0] == pytest.approx(temps[0, 0])


def test_json_round_trips(tmp_path) -> None:
    c = _pairs(Homography.translation(1, 2), SQUARE)
    save_correspondences(c, tmp_path / "c.json")
    assert np.array_equal(load_correspondences(tmp_path / "c.json").pairs, c.pairs)
    h = _rotation_about(5, 5, 20)
    save_homography(h, tmp_path / "h.json")
    assert np.allclose(load_homography(tmp_path / "h.json").m, h.m)


def test_estimate_ignores_correspondence_order(rng) -> None:
    truth = Homography(np.array([[1.02, -0.03, 5.0], [0.04, 0.99, -1.5], [2e-5, 1e-5, 1.0]]))
    for n, noise in ((4, 0.5), (8, 0.0)):
        source = rng.uniform(0, 100, (n, 2))
        pairs = np.hstack([source, truth.apply(source) + rng.normal(0, noise, (n, 2))])
        forward = estimate_homography(CorrespondenceSet(pairs))
        shuffled = estimate_homography(CorrespondenceSet(pairs[rng.permutation(n)]))
        assert np.allclose(forward.m, shuffled.m, rtol=0, atol=1e-9)
