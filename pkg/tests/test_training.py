import csv
import math

import numpy as np
import pytest

from data import build_dataset
from errors import DatasetError, FreezeViolationError
from hdrtnet import HdrtNet, IrBranch, RgbVariant
from imgio import RadianceImage
from metrics import pu_psnr
from models import AblationKind, DatasetSplit, GeneratorConfig, LossWeights, TrainConfig
from nncore import Tensor, no_grad
from training import (
    SWEEP_ALPHAS,
    SWEEP_BETAS,
    SceneDataset,
    _check_frozen,
    evaluate_model,
    load_model,
    register_scene,
    run_ablation,
    run_sweep,
    save_model,
    train_hdr_branch,
    train_ir_branch,
    train_variant,
    write_train_log,
)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def train_set(tiny_dataset):
    root, manifest = tiny_dataset
    return SceneDataset(root, manifest, "train")


def test_registered_scene_shares_one_frame(tiny_dataset) -> None:
    root, manifest = tiny_dataset
    scene = register_scene(root, manifest.scenes[0])
    assert (scene.ir.width, scene.ir.height) == (scene.sdr.width, scene.sdr.height)
    assert scene.hdr.data.shape[:2] == (scene.sdr.height, scene.sdr.width)
    assert scene.saturated.shape == (scene.sdr.height, scene.sdr.width)
    assert scene.sdr.width >= 32 and scene.sdr.height >= 32


def test_batches_are_seeded_and_shaped(train_set) -> None:
    codec = train_set.codec()
    a = train_set.sample_batch(np.random.default_rng(1), 3, 32, codec)
    b = train_set.sample_batch(np.random.default_rng(1), 3, 32, codec)
    assert a["sdr"].shape == (3, 3, 32, 32)
    assert a["ir"].shape == (3, 1, 32, 32)
    assert a["hdr"].shape == (3, 3, 32, 32)
    assert all(a[key].dtype == np.float32 for key in a)
    assert all(np.array_equal(a[key], b[key]) for key in a)
    assert a["sdr"].min() >= 0 and a["sdr"].max() <= 1
    assert a["ir"].min() >= 0 and a["ir"].max() <= 1


def test_crop_larger_than_overlap_is_rejected(train_set) -> None:
    with pytest.raises(DatasetError):
        train_set.sample_batch(np.random.default_rng(0), 1, 64)


def test_empty_split_is_rejected(tiny_dataset) -> None:
    root, manifest = tiny_dataset
    empty = manifest.model_copy(update={"split": DatasetSplit(train=manifest.split.train, val=[])})
    with pytest.raises(DatasetError):
        SceneDataset(root, empty, "val")


def test_two_stage_training_keeps_the_prefix_frozen(train_set, tiny_train_config) -> None:
    ir_branch, ir_log = train_ir_branch(train_set, tiny_train_config)
    assert isinstance(ir_branch, IrBranch)
    assert [row.step for row in ir_log] == [1, 2, 3]
    assert all(row.l_gan == 0.0 for row in ir_log)
    before = [p.data.copy() for p in ir_branch.prefix_parameters()]

    model, disc, hdr_log = train_hdr_branch(train_set, ir_branch, tiny_train_config, train_set.codec())
    assert isinstance(model, HdrtNet)
    assert model.ir_branch is ir_branch
    for old, p in zip(before, ir_branch.prefix_parameters()):
        assert np.array_equal(old, p.data)
        assert p.frozen
    assert all(math.isfinite(row.l_pix) and math.isfinite(row.l_gan) for row in hdr_log)
    assert disc.parameter_count() > 0


def test_frozen_check_detects_changes(train_set, tiny_train_config) -> None:
    ir_branch = IrBranch(tiny_train_config.widths, np.random.default_rng(0))
    params = ir_branch.prefix_parameters()
    snapshot = [p.data.copy() for p in params]
    params[0].data = params[0].data + 1.0
    with pytest.raises(FreezeViolationError):
        _check_frozen(params, snapshot)


def test_training_is_deterministic(train_set, tiny_train_config) -> None:
    codec = train_set.codec()
    first, log_a = train_variant(train_set, AblationKind.RGB, tiny_train_config, codec)
    second, log_b = train_variant(train_set, AblationKind.RGB, tiny_train_config, codec)
    assert [row.l_pix for row in log_a] == [row.l_pix for row in log_b]
    state_a, state_b = first.state_dict(), second.state_dict()
    assert all(np.array_equal(state_a[key], state_b[key]) for key in state_a)


def test_model_round_trip(tmp_path, tiny_dataset, train_set, tiny_train_config) -> None:
    root, manifest = tiny_dataset
    codec = train_set.codec()
    ir_branch, _ = train_ir_branch(train_set, tiny_train_config)
    model, _, log = train_hdr_branch(train_set, ir_branch, tiny_train_config, codec)
    save_model(model, tmp_path / "full", "full", tiny_train_config, codec)
    write_train_log(log, tmp_path / "full.log.csv")

    restored, restored_codec = load_model(tmp_path / "full")
    assert isinstance(restored, HdrtNet)
    assert restored.ir_branch.prefix_frozen
    assert restored_codec.e0 == pytest.approx(codec.e0)
    val_set = SceneDataset(root, manifest, "val")
    original = evaluate_model(model, val_set, codec)
    again = evaluate_model(restored, val_set, restored_codec)
    assert original[0].pu_psnr == pytest.approx(again[0].pu_psnr, rel=1e-4)

    with open(tmp_path / "full.log.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["step", "l_pix", "l_per", "l_gan", "lr"]
    assert len(rows) == 3


def test_rgb_variant_checkpoint_has_no_ir_input(tmp_path, train_set, tiny_train_config) -> None:
    model, _ = train_variant(train_set, AblationKind.RGB, tiny_train_config, train_set.codec())
    save_model(model, tmp_path / "rgb", "rgb", tiny_train_config, train_set.codec())
    restored, _ = load_model(tmp_path / "rgb.bin")
    assert isinstance(restored, RgbVariant)
    assert not restored.uses_ir


def test_ablation_table(tmp_path, tiny_dataset, tiny_train_config) -> None:
    root, manifest = tiny_dataset
    out = tmp_path / "ablation.csv"
    results = run_ablation(root, manifest, tiny_train_config, out)
    assert [r["variant"] for r in results] == ["rgb", "pixel", "combined", "full"]
    with open(out, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0][0] == "variant"
    assert len(rows[0]) == 10
    assert len(rows) == 5
    assert all(not math.isnan(float(row[7])) for row in rows[1:])


class _FixedBatch:
    """Serves the same crops at every step."""

    def __init__(self, batch):
        self.batch = batch

    def sample_batch(self, rng, batch_size, crop_size, codec=None):
        batch = dict(self.batch)
        if codec is not None:
            batch["hdr"] = codec.encode(batch["hdr"])
        return batch


@pytest.fixture(scope="module")
def over_exposed_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("over")
    config = GeneratorConfig(size=48, n_objects=3, max_parallax_px=3.0, under_key=2.0, well_key=2.0, over_key=2.0)
    manifest = build_dataset(4, root, config, seed=5)
    return SceneDataset(root, manifest, "train")


def test_ir_branch_overfits_four_crops(train_set) -> None:
    batch = train_set.sample_batch(np.random.default_rng(5), 4, 32)
    config = TrainConfig.desk(steps=500, batch_size=4, crop_size=32, log_every=100)
    ir_branch, log = train_ir_branch(_FixedBatch(batch), config)
    with no_grad():
        out = ir_branch(Tensor(batch["ir"]))
    assert np.mean(np.abs(out.data - batch["sdr"])) < 0.05
    assert log[-1].l_pix <= 0.5 * log[0].l_pix


def test_hdr_branch_overfits_and_recovers_clipped_regions(over_exposed_set) -> None:
    batch = over_exposed_set.sample_batch(np.random.default_rng(6), 4, 32)
    codec = over_exposed_set.codec()
    fixed = _FixedBatch(batch)
    ir_branch, _ = train_ir_branch(fixed, TrainConfig.desk(steps=100, batch_size=4, crop_size=32, log_every=0))
    config = TrainConfig.desk(steps=1000, batch_size=4, crop_size=32, log_every=0)
    model, _, _ = train_hdr_branch(fixed, ir_branch, config, codec)
    with no_grad():
        out = model(Tensor(batch["sdr"]), Tensor(batch["ir"]))
    predicted = codec.decode(out.data).transpose(0, 2, 3, 1)
    truth = batch["hdr"].astype(np.float64).transpose(0, 2, 3, 1)

    scores = [pu_psnr(RadianceImage(p), RadianceImage(t)) for p, t in zip(predicted, truth)]
    assert np.mean(scores) > 35.0

    clipped = np.all(batch["sdr"] == 1.0, axis=1)
    assert clipped.sum() > 100
    r = np.corrcoef(predicted.mean(axis=3)[clipped], truth.mean(axis=3)[clipped])[0, 1]
    assert r > 0.5


def test_sweep_grid_selects_best_cell(tmp_path, tiny_dataset, tiny_train_config) -> None:
    root, manifest = tiny_dataset
    out = tmp_path / "sweep.csv"
    results = run_sweep(root, manifest, tiny_train_config, out)
    assert [(r["alpha"], r["beta"]) for r in results] == [(a, b) for a in SWEEP_ALPHAS for b in SWEEP_BETAS]
    selected = [r for r in results if r["selected"]]
    assert len(selected) == 1
    assert selected[0]["pu_psnr"] == max(r["pu_psnr"] for r in results)
    with open(out, newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["alpha", "beta", "pu_psnr", "pu_ssim", "pu_vsi", "selected"]
    assert len(rows) == 9 and sum(int(row["selected"]) for row in rows) == 1
    assert LossWeights() == LossWeights(alpha=1.0, beta=1e-5)


def test_ablation_ordering_on_a_larger_set(tmp_path) -> None:
    manifest = build_dataset(64, tmp_path, GeneratorConfig(), seed=11, workers=4)
    config = TrainConfig.desk(steps=400, batch_size=4, log_every=0)
    results = {r["variant"]: r["pu_psnr_all"] for r in run_ablation(tmp_path, manifest, config)}
    assert results["full"] >= results["rgb"] + 0.2
    assert results["pixel"] >= results["rgb"]
