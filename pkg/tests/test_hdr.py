import math

import numpy as np
import pytest

from errors import BracketError, InvalidResponseError, RankDeficientError, ShapeMismatchError
from hdr import (
    Bracket,
    Crf,
    classify_exposure,
    hat_weight,
    load_crf,
    merge_brackets,
    recover_crf,
    saturation_mask,
    save_crf,
    simulate_bracket,
)
from imgio import RadianceImage, SdrImage
from models import ExposureClass
from storage import get_storage

EXPOSURES = [0.25, 1.0, 4.0, 16.0, 64.0]
MID_CODES = np.arange(20, 236)


def _scene(rng, size=64) -> RadianceImage:
    log_e = rng.uniform(math.log(1e-3), math.log(1.0), (size, size, 1))
    return RadianceImage(np.repeat(np.exp(log_e), 3, axis=2))


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def test_hat_weight_endpoints_and_midpoint() -> None:
    assert hat_weight(0) == 0
    assert hat_weight(255) == 0
    assert hat_weight(127) == 127
    assert hat_weight(128) == 127
    assert hat_weight(np.array([1, 254])).tolist() == [1, 1]


def test_analytic_responses_are_anchored() -> None:
    for crf in (Crf.linear(), Crf.gamma(2.2)):
        assert crf.g[128] == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.diff(crf.g) >= 0)
        assert crf.relative_exposure()[255] == pytest.approx(1.0)


def test_crf_rejects_invalid_curves() -> None:
    with pytest.raises(InvalidResponseError):
        Crf(np.zeros(10))
    g = Crf.linear().g.copy()
    g[200] = g[199] - 1.0
    with pytest.raises(InvalidResponseError):
        Crf(g)
    with pytest.raises(InvalidResponseError):
        Crf.gamma(0.0)


def test_recover_linear_response(rng) -> None:
    bracket = simulate_bracket(_scene(rng), Crf.linear(), EXPOSURES)
    crfs = recover_crf(bracket)
    truth = np.log(MID_CODES / 255.0) - math.log(128 / 255.0)
    assert len(crfs) == 3
    for crf in crfs:
        assert crf.g[128] == 0.0
        assert _rmse(crf.g[MID_CODES], truth) < 0.05


def test_recover_gamma_response(rng) -> None:
    bracket = simulate_bracket(_scene(rng), Crf.gamma(2.2), EXPOSURES)
    truth = (np.log(MID_CODES / 255.0) - math.log(128 / 255.0)) / 2.2
    for crf in recover_crf(bracket):
        assert _rmse(crf.g[MID_CODES], truth) < 0.05


def test_recovered_response_is_monotone(rng) -> None:
    bracket = simulate_bracket(_scene(rng), Crf.gamma(2.2), EXPOSURES, noise_sigma=2.0, seed=4)
    for crf in recover_crf(bracket, smoothness=1.0):
        assert np.all(np.diff(crf.g) >= 0)


def test_equal_exposures_are_rank_deficient() -> None:
    frame = SdrImage(np.full((4, 4, 3), 100, dtype=np.uint8), 1.0)
    with pytest.raises(RankDeficientError):
        Bracket((frame, frame))


def test_bracket_validation() -> None:
    short = SdrImage(np.zeros((4, 4, 3), dtype=np.uint8), 0.5)
    long = SdrImage(np.zeros((4, 4, 3), dtype=np.uint8), 2.0)
    with pytest.raises(BracketError):
        Bracket((short,))
    with pytest.raises(BracketError):
        Bracket((long, short))
    with pytest.raises(ShapeMismatchError):
        Bracket((short, SdrImage(np.zeros((4, 5, 3), dtype=np.uint8), 2.0)))


def test_too_few_pixels_to_overdetermine() -> None:
    scene = RadianceImage(np.full((4, 4, 3), 0.2))
    bracket = simulate_bracket(scene, Crf.linear(), [0.5, 1.0, 2.0])
    with pytest.raises(BracketError):
        recover_crf(bracket)


def test_merge_constant_scene_with_linear_response() -> None:
    scene = RadianceImage(np.full((8, 8, 3), 0.5))
    bracket = simulate_bracket(scene, Crf.linear(), [0.25, 1.0, 4.0])
    merged = merge_brackets(bracket, Crf.linear())
    assert np.allclose(merged.data, 0.5, rtol=0.02)
    assert not saturation_mask(bracket).any()


def test_pixel_clipped_in_every_frame_uses_shortest_exposure() -> None:
    data = np.full((2, 2, 3), 0.5)
    data[0, 0] = 1000.0
    bracket = simulate_bracket(RadianceImage(data), Crf.linear(), [0.5, 1.0, 2.0])
    merged = merge_brackets(bracket, Crf.linear())
    mask = saturation_mask(bracket)
    assert mask[0, 0]
    assert mask.sum() == 1
    assert merged.data[0, 0, 0] == pytest.approx(1 / 0.5)


def test_round_trip_through_recovered_response(rng) -> None:
    for crf in (Crf.linear(), Crf.gamma(2.2)):
        scene = _scene(rng)
        bracket = simulate_bracket(scene, crf, EXPOSURES)
        merged = merge_brackets(bracket, recover_crf(bracket))
        usable = ~saturation_mask(bracket)
        error = np.abs(merged.data - scene.data) / scene.data
        assert np.median(error[usable]) < 0.05
        assert np.mean(error[usable] < 0.05) > 0.95


def test_simulation_endpoints() -> None:
    black = simulate_bracket(RadianceImage(np.zeros((2, 2, 3))), Crf.linear(), [1.0, 2.0])
    assert not black.codes().any()
    unit = simulate_bracket(RadianceImage(np.ones((2, 2, 3))), Crf.linear(), [1.0, 2.0])
    assert np.all(unit.frames[0].data == 255)


def test_simulation_is_seeded(rng) -> None:
    scene = _scene(rng, 16)
    a = simulate_bracket(scene, Crf.gamma(2.2), [0.5, 2.0], noise_sigma=1.5, seed=11)
    b = simulate_bracket(scene, Crf.gamma(2.2), [0.5, 2.0], noise_sigma=1.5, seed=11)
    assert np.array_equal(a.codes(), b.codes())


def test_classify_exposure() -> None:
    over = np.zeros((4, 4, 3), dtype=np.uint8)
    over[:2] = 255
    assert classify_exposure(SdrImage(over)) == ExposureClass.OVER
    under = np.full((4, 4, 3), 100, dtype=np.uint8)
    under[:2] = 0
    assert classify_exposure(SdrImage(under)) == ExposureClass.UNDER
    assert classify_exposure(SdrImage(np.full((4, 4, 3), 100, dtype=np.uint8))) == ExposureClass.WELL


def test_crf_file_round_trip(tmp_path) -> None:
    save_crf(Crf.gamma(2.2), tmp_path / "crf.json")
    document = get_storage().read_json(tmp_path / "crf.json")
    assert set(document) == {"lambda", "channels"}
    (back,) = load_crf(tmp_path / "crf.json")
    assert np.allclose(back.g, Crf.gamma(2.2).g)


def test_hat_weight_is_symmetric() -> None:
    z = np.arange(256)
    assert np.array_equal(hat_weight(z), hat_weight(255 - z))


def test_merge_is_invariant_to_exposure_units(rng) -> None:
    bracket = simulate_bracket(_scene(rng, size=16), Crf.linear(), [0.25, 1.0, 4.0])
    scaled = Bracket(tuple(SdrImage(f.data, f.exposure_time * 8.0) for f in bracket.frames))
    merged = merge_brackets(bracket, Crf.linear())
    assert np.allclose(merge_brackets(scaled, Crf.linear()).data, merged.data / 8.0, rtol=1e-6, atol=0)
