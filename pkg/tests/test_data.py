import numpy as np
import pytest

from data import (
    build_dataset,
    compose_scene,
    generate_scene,
    load_manifest,
    load_scene,
    manifest_path,
    split_scenes,
    validate_manifest,
)
from errors import DatasetError, DegenerateConfigurationError
from hdr import Crf, classify_exposure, load_crf, merge_brackets, simulate_bracket
from imgio import RadianceImage
from models import ExposureClass, GeneratorConfig
from register import estimate_homography


def test_generate_scene_is_seeded(tiny_generator_config) -> None:
    first, temp_a = generate_scene(11, tiny_generator_config)
    second, temp_b = generate_scene(11, tiny_generator_config)
    other, _ = generate_scene(12, tiny_generator_config)
    assert np.array_equal(first.data, second.data)
    assert np.array_equal(temp_a, temp_b)
    assert not np.array_equal(first.data, other.data)


def test_scene_spans_the_configured_range(tiny_generator_config) -> None:
    scene, temperature = generate_scene(2, tiny_generator_config)
    assert scene.data.shape == (48, 48, 3)
    assert scene.data.min() > 0
    assert scene.data.max() / scene.data.min() > 1e3
    config = tiny_generator_config
    assert temperature.min() >= config.calib_min and temperature.max() <= config.calib_max


def test_correlated_objects_track_radiance() -> None:
    config = GeneratorConfig(size=32, n_objects=8, decorrelated_fraction=0.0)
    layout = compose_scene(np.random.default_rng(5), config)
    log_r = [obj.log_radiance for obj in layout.objects]
    temps = [obj.temperature for obj in layout.objects]
    assert not any(obj.decorrelated for obj in layout.objects)
    assert np.corrcoef(log_r, temps)[0, 1] >= 0.99


def test_decorrelated_fraction_is_honoured() -> None:
    config = GeneratorConfig(size=32, n_objects=10, decorrelated_fraction=0.3)
    layout = compose_scene(np.random.default_rng(5), config)
    assert sum(obj.decorrelated for obj in layout.objects) == 3


def test_degenerate_configurations_are_rejected() -> None:
    with pytest.raises(DegenerateConfigurationError):
        generate_scene(0, GeneratorConfig(radiance_min=10.0, radiance_max=1.0))
    with pytest.raises(DegenerateConfigurationError):
        generate_scene(0, GeneratorConfig(decorrelated_fraction=1.5))
    with pytest.raises(DatasetError):
        build_dataset(0, "unused")


def test_bright_scene_is_over_exposed() -> None:
    scene = RadianceImage(np.full((8, 8, 3), 10.0))
    bracket = simulate_bracket(scene, Crf.gamma(2.2), [1 / 8, 1, 8])
    assert classify_exposure(bracket.frames[1]) == ExposureClass.OVER
    dark = simulate_bracket(RadianceImage(np.full((8, 8, 3), 1e-7)), Crf.gamma(2.2), [1 / 8, 1, 8])
    assert classify_exposure(dark.frames[1]) == ExposureClass.UNDER


def test_middle_frame_decides_the_class_not_the_longest() -> None:
    bracket = simulate_bracket(RadianceImage(np.full((8, 8, 3), 0.5)), Crf.gamma(2.2), [1 / 8, 1, 8])
    assert classify_exposure(bracket.frames[-1]) == ExposureClass.OVER
    assert classify_exposure(bracket.frames[1]) == ExposureClass.WELL


def test_dataset_layout_and_split(tmp_path) -> None:
    config = GeneratorConfig(size=32, n_objects=2)
    manifest = build_dataset(10, tmp_path / "a", config, seed=7)
    assert len(manifest.scenes) == 10
    assert len(manifest.split.train) == 8 and len(manifest.split.val) == 2
    assert not set(manifest.split.train) & set(manifest.split.val)
    assert (tmp_path / "a" / "manifest.json").exists()
    assert load_manifest(tmp_path / "a") == manifest
    for record in manifest.scenes:
        assert len(record.sdr_paths) == 3
        assert record.exposure_times == sorted(record.exposure_times)

    again = build_dataset(10, tmp_path / "b", config, seed=7)
    assert again.model_dump() == manifest.model_dump()
    for record in manifest.scenes:
        first = (tmp_path / "a" / record.hdr_path).read_bytes()
        assert first == (tmp_path / "b" / record.hdr_path).read_bytes()


def test_parallel_generation_matches_serial(tmp_path) -> None:
    config = GeneratorConfig(size=32, n_objects=2)
    serial = build_dataset(3, tmp_path / "serial", config, seed=1, workers=1)
    parallel = build_dataset(3, tmp_path / "parallel", config, seed=1, workers=3)
    assert serial.model_dump() == parallel.model_dump()


def test_split_is_a_partition() -> None:
    ids = [f"s{i}" for i in range(7)]
    split = split_scenes(ids, seed=4)
    assert sorted(split.train + split.val) == sorted(ids)
    assert split == split_scenes(ids, seed=4)


def test_zero_parallax_gives_identity_registration(tmp_path) -> None:
    config = GeneratorConfig(size=32, n_objects=2, max_parallax_px=0.0)
    manifest = build_dataset(1, tmp_path, config, seed=0)
    scene = load_scene(tmp_path, manifest.scenes[0])
    h = estimate_homography(scene.correspondences)
    assert np.allclose(h.m, np.eye(3), atol=1e-6)
    assert scene.ir.width == 32 and scene.ir.height == 32


def test_written_brackets_merge_back_to_ground_truth(tiny_dataset) -> None:
    root, manifest = tiny_dataset
    crf = load_crf(root / manifest.crf_path)
    for record in manifest.scenes:
        scene = load_scene(root, record)
        merged = merge_brackets(scene.bracket, crf)
        codes = np.stack([frame.data for frame in scene.bracket.frames])
        mid_range = np.any((codes >= 64) & (codes <= 191), axis=0)
        error = (np.abs(merged.data - scene.hdr.data) / scene.hdr.data)[mid_range]
        if error.size:
            assert np.median(error) < 0.02
            assert np.percentile(error, 95) < 0.05
        assert record.exposure_class == classify_exposure(scene.middle)


@pytest.mark.slow
def test_every_exposure_class_appears(tmp_path) -> None:
    manifest = build_dataset(100, tmp_path, GeneratorConfig(size=32), seed=0, workers=4)
    assert {record.exposure_class for record in manifest.scenes} == set(ExposureClass)


def test_validate_manifest_reports_missing_files(tmp_path) -> None:
    manifest = build_dataset(2, tmp_path, GeneratorConfig(size=32, n_objects=1), seed=2)
    validate_manifest(tmp_path, manifest)
    (tmp_path / manifest.scenes[1].ir_path).unlink()
    with pytest.raises(DatasetError, match=manifest.scenes[1].scene_id):
        validate_manifest(tmp_path, manifest)


def test_manifest_path_accepts_file_or_directory(tmp_path) -> None:
    assert manifest_path(tmp_path) == tmp_path / "manifest.json"
    assert manifest_path(tmp_path / "other.json") == tmp_path / "other.json"
