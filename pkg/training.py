"""Training loops, evaluation and the ablation / loss-weight sweep harnesses."""
import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import settings
from data import load_scene
from errors import DatasetError, EmptyOverlapError, FreezeViolationError, TrainingDivergedError
from hdr import saturation_mask
from hdrtnet import (
    Discriminator,
    HdrtNet,
    IrBranch,
    LogRadianceCodec,
    PerceptualExtractor,
    build_ablation_variant,
    hdr_loss,
    infer,
)
from imgio import IrImage, RadianceImage, SdrImage, crop_image, ir_to_unit, sdr_to_unit
from metrics import evaluate, summarize_rows
from models import AblationKind, LossWeights, Manifest, MetricRow, SceneRecord, TrainConfig, TrainLogRow
from nncore import (
    Adam,
    Module,
    Parameter,
    Tensor,
    backward,
    load_checkpoint,
    read_checkpoint_metadata,
    save_checkpoint,
)
from register import estimate_homography, largest_valid_rectangle, warp_image
from storage import get_storage

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SWEEP_ALPHAS = (0.1, 1.0, 10.0)
SWEEP_BETAS = (1e-6, 1e-5, 1e-4)
ABLATION_ORDER = (AblationKind.RGB, AblationKind.PIXEL, AblationKind.COMBINED, AblationKind.FULL)
METRIC_GROUPS = ("over", "under", "all")


@dataclass(frozen=True, eq=False)
class RegisteredScene:
    """Middle SDR frame, IR and ground truth cropped to the registered overlap."""

    record: SceneRecord
    sdr: SdrImage
    ir: IrImage
    hdr: RadianceImage
    saturated: np.ndarray


def register_scene(root: PathLike, record: SceneRecord) -> RegisteredScene:
    scene = load_scene(root, record)
    middle = scene.middle
    h = estimate_homography(scene.correspondences)
    warped, validity = warp_image(scene.ir, h, middle.width, middle.height)
    top, left, height, width = largest_valid_rectangle(validity)
    if height * width == 0:
        raise EmptyOverlapError(f"{record.scene_id}: IR frame does not overlap the RGB frame")
    return RegisteredScene(
        record=record,
        sdr=crop_image(middle, top, left, height, width),
        ir=crop_image(warped, top, left, height, width),
        hdr=crop_image(scene.hdr, top, left, height, width),
        saturated=saturation_mask(scene.bracket)[top:top + height, left:left + width],
    )


class SceneDataset:
    """Registered scenes of one manifest split, sampled as seeded random crops."""

    def __init__(self, root: PathLike, manifest: Manifest, split: str = "train"):
        ids = getattr(manifest.split, split)
        if not ids:
            raise DatasetError(f"split '{split}' is empty")
        self.root = Path(root)
        self.split = split
        self.scenes = [register_scene(self.root, manifest.scene(scene_id)) for scene_id in ids]
        logger.info(f"Loaded {len(self.scenes)} {split} scenes from {self.root}")

    def __len__(self) -> int:
        return len(self.scenes)

    def sample_batch(
        self, rng: np.random.Generator, batch_size: int, crop_size: int, codec: Optional[LogRadianceCodec] = None
    ) -> Dict[str, np.ndarray]:
        """Arrays in (N, C, crop, crop) layout: sdr and ir in [0, 1], hdr log-encoded when a codec is given."""
        sdr, ir, hdr = [], [], []
        for _ in range(batch_size):
            scene = self.scenes[int(rng.integers(len(self.scenes)))]
            height, width = scene.sdr.height, scene.sdr.width
            if height < crop_size or width < crop_size:
                raise DatasetError(
                    f"{scene.record.scene_id}: registered overlap {width}x{height} is smaller than crop {crop_size}"
                )
            top = int(rng.integers(height - crop_size + 1))
            left = int(rng.integers(width - crop_size + 1))
            window = (slice(top, top + crop_size), slice(left, left + crop_size))
            sdr.append(sdr_to_unit(scene.sdr)[window].transpose(2, 0, 1))
            ir.append(ir_to_unit(scene.ir)[window][None])
            hdr.append(scene.hdr.data[window].transpose(2, 0, 1))
        batch = {name: np.stack(arrays).astype(np.float32) for name, arrays in (("sdr", sdr), ("ir", ir), ("hdr", hdr))}
        if codec is not None:
            batch["hdr"] = codec.encode(batch["hdr"])
        return batch

    def codec(self) -> LogRadianceCodec:
        return LogRadianceCodec.from_radiance([scene.hdr for scene in self.scenes])


def _check_finite(loss: Tensor, step: int):
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDivergedError(f"loss became {value} at step {step}")


def _forward(model: Module, batch: Dict[str, np.ndarray]) -> Tensor:
    if getattr(model, "uses_ir", False):
        return model(Tensor(batch["sdr"]), Tensor(batch["ir"]))
    return model(Tensor(batch["sdr"]))


def _should_log(step: int, config: TrainConfig) -> bool:
    return step == 1 or step == config.steps or (config.log_every > 0 and step % config.log_every == 0)


def train_ir_branch(dataset: SceneDataset, config: TrainConfig) -> Tuple[IrBranch, List[TrainLogRow]]:
    """Stage one: IR to RGB translation with pixel + alpha * perceptual loss."""
    rng = np.random.default_rng(config.seed)
    model = IrBranch(config.widths, rng)
    extractor = PerceptualExtractor(config.perceptual_seed)
    optimizer = Adam(model.parameters(), config.lr, config.lr_halve_every)
    model.train()
    log: List[TrainLogRow] = []
    for step in range(1, config.steps + 1):
        batch = dataset.sample_batch(rng, config.batch_size, config.crop_size)
        out = model(Tensor(batch["ir"]))
        terms = hdr_loss(out, Tensor(batch["sdr"]), extractor, config.loss)
        _check_finite(terms.total, step)
        lr = optimizer.lr
        optimizer.zero_grad()
        backward(terms.total)
        optimizer.step()
        if _should_log(step, config):
            l_pix, l_per = float(terms.pixel.data), float(terms.perceptual.data)
            log.append(TrainLogRow(step=step, l_pix=l_pix, l_per=l_per, l_gan=0.0, lr=lr))
            logger.info(f"[ir] step {step}/{config.steps} l_pix={l_pix:.5f} l_per={l_per:.5f}")
    return model, log


def _train_generator(
    model: Module,
    params: List[Parameter],
    dataset: SceneDataset,
    config: TrainConfig,
    codec: LogRadianceCodec,
    rng: np.random.Generator,
    tag: str,
) -> Tuple[Discriminator, List[TrainLogRow]]:
    """pixel + alpha * perceptual + beta * adversarial; discriminator steps 1:1 after the generator."""
    extractor = PerceptualExtractor(config.perceptual_seed)
    disc = Discriminator(3, config.disc_width, rng)
    opt_g = Adam(params, config.lr, config.lr_halve_every)
    opt_d = Adam(disc.parameters(), config.lr, config.lr_halve_every)
    model.train()
    disc.train()
    log: List[TrainLogRow] = []
    for step in range(1, config.steps + 1):
        batch = dataset.sample_batch(rng, config.batch_size, config.crop_size, codec)
        out = _forward(model, batch)
        terms = hdr_loss(out, Tensor(batch["hdr"]), extractor, config.loss, disc)
        _check_finite(terms.total, step)
        lr = opt_g.lr
        opt_g.zero_grad()
        disc.zero_grad()
        backward(terms.total)
        opt_g.step()
        if terms.discriminator is not None:
            _check_finite(terms.discriminator, step)
            disc.zero_grad()
            backward(terms.discriminator)
            opt_d.step()
        if _should_log(step, config):
            l_pix, l_per = float(terms.pixel.data), float(terms.perceptual.data)
            l_gan = float(terms.generator.data) if terms.generator is not None else 0.0
            log.append(TrainLogRow(step=step, l_pix=l_pix, l_per=l_per, l_gan=l_gan, lr=lr))
            logger.info(f"[{tag}] step {step}/{config.steps} l_pix={l_pix:.5f} l_per={l_per:.5f} l_gan={l_gan:.5f}")
    return disc, log


def _snapshot(params: Sequence[Parameter]) -> List[np.ndarray]:
    return [p.data.copy() for p in params]


def _check_frozen(params: Sequence[Parameter], snapshot: Sequence[np.ndarray]):
    for index, (p, before) in enumerate(zip(params, snapshot)):
        if not p.frozen:
            raise FreezeViolationError(f"IR prefix parameter {index} was unfrozen")
        if not np.array_equal(p.data, before):
            raise FreezeViolationError(f"IR prefix parameter {index} changed during HDR training")
        if p.grad is not None and np.any(p.grad):
            raise FreezeViolationError(f"IR prefix parameter {index} received a gradient")


def train_hdr_branch(
    dataset: SceneDataset, ir_branch: IrBranch, config: TrainConfig, codec: LogRadianceCodec
) -> Tuple[HdrtNet, Discriminator, List[TrainLogRow]]:
    """Stage two: freeze the IR prefix and train the HDR branch on its features."""
    rng = np.random.default_rng(config.seed + 1)
    model = HdrtNet(config.widths, config.fusion_points, rng)
    model.ir_branch = ir_branch.freeze_prefix()
    prefix = ir_branch.prefix_parameters()
    snapshot = _snapshot(prefix)
    disc, log = _train_generator(model, model.trainable_parameters(), dataset, config, codec, rng, "hdr")
    _check_frozen(prefix, snapshot)
    return model, disc, log


def train_variant(
    dataset: SceneDataset, kind: AblationKind, config: TrainConfig, codec: LogRadianceCodec
) -> Tuple[Module, List[TrainLogRow]]:
    """Single-stage training of the rgb, pixel and combined variants; full runs both stages."""
    kind = AblationKind(kind)
    if kind == AblationKind.FULL:
        ir_branch, ir_log = train_ir_branch(dataset, config)
        model, _, hdr_log = train_hdr_branch(dataset, ir_branch, config, codec)
        return model, ir_log + hdr_log
    model = build_ablation_variant(kind, config)
    rng = np.random.default_rng(config.seed + 1)
    _, log = _train_generator(model, model.trainable_parameters(), dataset, config, codec, rng, kind.value)
    return model, log


def evaluate_model(
    model: Module,
    dataset: SceneDataset,
    codec: LogRadianceCodec,
    peak_luminance: float = settings.PEAK_LUMINANCE,
) -> List[MetricRow]:
    rows = []
    for scene in dataset.scenes:
        prediction = infer(model, scene.sdr, scene.ir if getattr(model, "uses_ir", False) else None, codec)
        report = evaluate(prediction, scene.hdr, peak_luminance, scene.saturated)
        rows.append(MetricRow(
            scene_id=scene.record.scene_id,
            exposure_class=scene.record.exposure_class,
            pu_psnr=report.pu_psnr,
            pu_ssim=report.pu_ssim,
            pu_vsi=report.pu_vsi,
        ))
    return rows


def _grouped_columns(rows: Sequence[MetricRow]) -> Dict[str, float]:
    summary = summarize_rows(rows)
    columns = {}
    for group in METRIC_GROUPS:
        for metric in ("pu_psnr", "pu_ssim", "pu_vsi"):
            columns[f"{metric}_{group}"] = summary.get(group, {}).get(metric, float("nan"))
    return columns


def _format(value: float) -> str:
    return "nan" if math.isnan(value) else f"{value:.6f}"


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def run_ablation(
    root: PathLike, manifest: Manifest, config: TrainConfig, out_path: Optional[PathLike] = None
) -> List[Dict[str, object]]:
    """Train every variant on the train split and score it on the validation split."""
    train_set = SceneDataset(root, manifest, "train")
    val_set = SceneDataset(root, manifest, "val")
    codec = train_set.codec()
    results = []
    for kind in ABLATION_ORDER:
        logger.info(f"Ablation: training {kind.value} variant")
        model, _ = train_variant(train_set, kind, config, codec)
        columns = _grouped_columns(evaluate_model(model, val_set, codec))
        results.append({"variant": kind.value, **columns})
    if out_path is not None:
        header = ["variant"] + [f"{m}_{g}" for g in METRIC_GROUPS for m in ("pu_psnr", "pu_ssim", "pu_vsi")]
        lines = [[r["variant"]] + [_format(r[c]) for c in header[1:]] for r in results]
        get_storage().write_text(out_path, _csv_text(header, lines))
    return results


def run_sweep(
    root: PathLike,
    manifest: Manifest,
    config: TrainConfig,
    out_path: Optional[PathLike] = None,
    alphas: Sequence[float] = SWEEP_ALPHAS,
    betas: Sequence[float] = SWEEP_BETAS,
) -> List[Dict[str, object]]:
    """Full model over the alpha x beta grid; the cell with the best mean pu-PSNR is selected."""
    train_set = SceneDataset(root, manifest, "train")
    val_set = SceneDataset(root, manifest, "val")
    codec = train_set.codec()
    ir_branches: Dict[float, IrBranch] = {}
    results = []
    for alpha in alphas:
        for beta in betas:
            cell = config.model_copy(update={"loss": LossWeights(alpha=alpha, beta=beta)})
            if alpha not in ir_branches:
                ir_branches[alpha], _ = train_ir_branch(train_set, cell)
            model, _, _ = train_hdr_branch(train_set, ir_branches[alpha], cell, codec)
            summary = summarize_rows(evaluate_model(model, val_set, codec))["all"]
            results.append({
                "alpha": alpha,
                "beta": beta,
                "pu_psnr": summary["pu_psnr"],
                "pu_ssim": summary["pu_ssim"],
                "pu_vsi": summary["pu_vsi"],
                "selected": False,
            })
            logger.info(f"Sweep alpha={alpha} beta={beta}: pu-PSNR {summary['pu_psnr']:.3f}")
    best = max(range(len(results)), key=lambda i: results[i]["pu_psnr"])
    results[best]["selected"] = True
    if out_path is not None:
        header = ["alpha", "beta", "pu_psnr", "pu_ssim", "pu_vsi", "selected"]
        lines = [
            [f"{r['alpha']:g}", f"{r['beta']:g}", _format(r["pu_psnr"]), _format(r["pu_ssim"]),
             _format(r["pu_vsi"]), str(int(r["selected"]))]
            for r in results
        ]
        get_storage().write_text(out_path, _csv_text(header, lines))
    return results


def write_train_log(rows: Sequence[TrainLogRow], path: PathLike) -> Path:
    lines = [[str(r.step), f"{r.l_pix:.6f}", f"{r.l_per:.6f}", f"{r.l_gan:.6f}", f"{r.lr:.6g}"] for r in rows]
    return get_storage().write_text(path, _csv_text(["step", "l_pix", "l_per", "l_gan", "lr"], lines))


def save_model(model: Module, path: PathLike, kind: str, config: TrainConfig, codec: Optional[LogRadianceCodec] = None) -> Path:
    metadata = {"kind": kind, "widths": list(config.widths), "fusion_points": list(config.fusion_points)}
    if codec is not None:
        metadata["e0"] = codec.e0
    return save_checkpoint(model, path, metadata)


def load_model(path: PathLike) -> Tuple[Module, Optional[LogRadianceCodec]]:
    """Rebuild a saved model from its checkpoint manifest."""
    metadata = read_checkpoint_metadata(path)
    kind = metadata.get("kind")
    config = TrainConfig(widths=metadata["widths"], fusion_points=metadata.get("fusion_points", [0, 1, 2, 3]))
    if kind == "ir":
        model: Module = IrBranch(config.widths, np.random.default_rng(0))
    else:
        model = build_ablation_variant(AblationKind(kind), config)
    load_checkpoint(model, path)
    if isinstance(model, HdrtNet) and kind == AblationKind.FULL.value:
        model.ir_branch.freeze_prefix()
    codec = LogRadianceCodec(metadata["e0"]) if "e0" in metadata else None
    return model, codec
