import csv
import json

import numpy as np
import pytest

from data import load_manifest
from hdr import Crf, save_crf, simulate_bracket
from imgio import IrImage, RadianceImage, SdrImage, read_image, write_image
from main import run
from models import ExposureClass, MetricRow
from metrics import write_metric_rows
from register import CorrespondenceSet, Homography, save_correspondences


@pytest.fixture
def scene_file(tmp_path, rng):
    path = tmp_path / "scene.pfm"
    write_image(RadianceImage(rng.lognormal(0, 1.5, (32, 32, 3))), path)
    return path


def _csv_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_help_and_usage_errors() -> None:
    assert run(["--help"]) == 0
    assert run([]) == 2
    assert run(["metrics", "--test", "only.pfm"]) == 2
    assert run(["no-such-command"]) == 2


def test_missing_input_exits_3(tmp_path) -> None:
    assert run(["metrics", "--test", str(tmp_path / "nope.pfm"), "--ref", str(tmp_path / "nope.pfm")]) == 3


def test_wrong_image_kind_exits_1(tmp_path) -> None:
    png = tmp_path / "frame.png"
    write_image(SdrImage(np.zeros((8, 8, 3), dtype=np.uint8)), png)
    assert run(["tonemap", "--input", str(png), "--out", str(tmp_path / "out.png")]) == 1


def test_metrics_of_identical_images(scene_file, capsys) -> None:
    assert run(["metrics", "--test", str(scene_file), "--ref", str(scene_file)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "scene_id,exposure_class,pu_psnr,pu_ssim,pu_vsi"
    assert lines[1] == "scene,well,100.0000,1.000000,1.000000"


def test_metrics_writes_csv(tmp_path, scene_file) -> None:
    out = tmp_path / "m.csv"
    code = run([
        "metrics", "--test", str(scene_file), "--ref", str(scene_file),
        "--scene-id", "s1", "--exposure-class", "over", "--out", str(out),
    ])
    assert code == 0
    row = _csv_rows(out)[0]
    assert row["scene_id"] == "s1" and row["exposure_class"] == "over"


def test_gen_data(tmp_path) -> None:
    out = tmp_path / "data"
    assert run(["gen-data", "--n", "10", "--seed", "7", "--out", str(out), "--size", "32"]) == 0
    manifest = load_manifest(out)
    assert len(manifest.scenes) == 10
    assert len(manifest.split.train) == 8
    assert all((out / record.hdr_path).exists() for record in manifest.scenes)


def test_merge_with_known_response(tmp_path, radiance_ramp) -> None:
    crf = Crf.gamma(2.2)
    save_crf(crf, tmp_path / "crf.json")
    bracket = simulate_bracket(radiance_ramp, crf, [0.0025 * 4.0 ** k for k in range(8)])
    frames = []
    for index, frame in enumerate(bracket.frames):
        write_image(frame, tmp_path / f"f{index}.png")
        frames.append(str(tmp_path / f"f{index}.png"))
    out = tmp_path / "merged.pfm"
    code = run([
        "merge", "--frames", *frames, "--crf", str(tmp_path / "crf.json"),
        "--out", str(out), "--mask-out", str(tmp_path / "mask.png"),
    ])
    assert code == 0
    merged = read_image(out)
    error = np.abs(merged.data - radiance_ramp.data) / radiance_ramp.data
    assert np.median(error) < 0.02
    assert np.percentile(error, 95) < 0.05
    assert read_image(tmp_path / "mask.png").data.shape == (16, 16, 3)


def test_merge_rejects_mismatched_exposure_list(tmp_path) -> None:
    frame = tmp_path / "f.png"
    write_image(SdrImage(np.full((4, 4, 3), 128, dtype=np.uint8)), frame)
    code = run(["merge", "--frames", str(frame), str(frame), "--exposures", "1", "--out", str(tmp_path / "o.pfm")])
    assert code == 1


def test_register_translation(tmp_path) -> None:
    temps = np.add.outer(np.arange(24.0), np.arange(32.0))
    write_image(IrImage(temps), tmp_path / "ir.pgm")
    write_image(SdrImage(np.zeros((24, 32, 3), dtype=np.uint8)), tmp_path / "rgb.png")
    source = np.array([[2, 2], [28, 3], [27, 20], [3, 21]], dtype=float)
    pairs = CorrespondenceSet(np.hstack([source, Homography.translation(4, 2).apply(source)]))
    save_correspondences(pairs, tmp_path / "pairs.json")
    code = run([
        "register", "--rgb", str(tmp_path / "rgb.png"), "--ir", str(tmp_path / "ir.pgm"),
        "--correspondences", str(tmp_path / "pairs.json"),
        "--out-rgb", str(tmp_path / "rgb_crop.png"), "--out-ir", str(tmp_path / "ir_crop.pgm"),
        "--homography-out", str(tmp_path / "h.json"),
    ])
    assert code == 0
    crop = read_image(tmp_path / "rgb_crop.png")
    assert (crop.width, crop.height) == (28, 22)
    assert isinstance(read_image(tmp_path / "ir_crop.pgm"), IrImage)
    assert np.allclose(json.loads((tmp_path / "h.json").read_text()), Homography.translation(4, 2).m.ravel(), atol=1e-6)


def test_tonemap(tmp_path, scene_file) -> None:
    out = tmp_path / "display.png"
    assert run(["tonemap", "--input", str(scene_file), "--out", str(out), "--contrast", "2"]) == 0
    image = read_image(out)
    assert isinstance(image, SdrImage)
    assert image.data.shape == (32, 32, 3)


def test_report_groups(tmp_path) -> None:
    rows = [
        MetricRow(scene_id="a", exposure_class=ExposureClass.OVER, pu_psnr=30.0, pu_ssim=0.9, pu_vsi=0.95),
        MetricRow(scene_id="b", exposure_class=ExposureClass.UNDER, pu_psnr=20.0, pu_ssim=0.7, pu_vsi=0.9),
    ]
    write_metric_rows(rows[:1], tmp_path / "one.csv")
    write_metric_rows(rows[1:], tmp_path / "two.csv")
    out = tmp_path / "summary.csv"
    assert run(["report", "--inputs", str(tmp_path / "one.csv"), str(tmp_path / "two.csv"), "--out", str(out)]) == 0
    summary = {row["group"]: row for row in _csv_rows(out)}
    assert summary["all"]["count"] == "2"
    assert summary["all"]["pu_psnr"] == "25.0000"
    assert summary["over"]["pu_ssim"] == "0.900000"
