"""Synthetic RGB-thermal scene generation and dataset assembly.

Dataset layout under the output directory::

    manifest.json
    crf.json
    scenes/<scene_id>/hdr.pfm
    scenes/<scene_id>/sdr_<k>.png (+ .json sidecar with exposure time)
    scenes/<scene_id>/ir.pgm (+ .json sidecar with calibration range)
    scenes/<scene_id>/correspondences.json

Manifest paths are relative to the dataset root.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from config import settings
from errors import DatasetError, DegenerateConfigurationError, HdrtError
from hdr import Bracket, Crf, classify_exposure, save_crf, simulate_bracket
from imgio import REC709, IrImage, RadianceImage, SdrImage, read_image, write_image
from models import DatasetSplit, GeneratorConfig, Manifest, SceneRecord
from register import CorrespondenceSet, Homography, estimate_homography, load_correspondences, save_correspondences, warp_image
from storage import get_storage

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"
CRF_NAME = "crf.json"

# Temperature kept this far inside the calibration range
TEMPERATURE_MARGIN = 5.0


@dataclass(frozen=True)
class SceneObject:
    shape: str
    center: Tuple[float, float]
    radius: float
    log_radiance: float
    temperature: float
    decorrelated: bool


@dataclass(frozen=True, eq=False)
class SceneLayout:
    radiance: RadianceImage
    temperature: np.ndarray
    objects: Tuple[SceneObject, ...]


@dataclass(frozen=True, eq=False)
class LoadedScene:
    record: SceneRecord
    hdr: RadianceImage
    bracket: Bracket
    ir: IrImage
    correspondences: CorrespondenceSet

    @property
    def middle(self) -> SdrImage:
        return self.bracket.frames[len(self.bracket.frames) // 2]


def _check_config(config: GeneratorConfig):
    if config.size <= 0:
        raise DegenerateConfigurationError(f"scene size must be positive, got {config.size}")
    if not 0 < config.radiance_min < config.radiance_max:
        raise DegenerateConfigurationError(
            f"radiance range [{config.radiance_min}, {config.radiance_max}] is empty or not positive"
        )
    if not 0.0 <= config.decorrelated_fraction <= 1.0:
        raise DegenerateConfigurationError("decorrelated fraction must lie in [0, 1]")
    if config.n_objects < 0:
        raise DegenerateConfigurationError("object count must be non-negative")
    if not config.calib_max - config.calib_min > 2 * TEMPERATURE_MARGIN:
        raise DegenerateConfigurationError("calibration range too narrow for scene temperatures")
    if config.ir_scale <= 0:
        raise DegenerateConfigurationError("IR scale ratio must be positive")
    if min(config.under_key, config.well_key, config.over_key) <= 0 or config.key_jitter < 1.0:
        raise DegenerateConfigurationError("exposure keys must be positive and the key jitter at least 1")


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma)
    span = field.max() - field.min()
    return (field - field.min()) / span if span > 0 else np.zeros_like(field)


def _object_mask(obj: SceneObject, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    cy, cx = obj.center
    if obj.shape == "disk":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= obj.radius ** 2
    return (np.abs(ys - cy) <= obj.radius) & (np.abs(xs - cx) <= obj.radius)


def _correlated_temperature(log_radiance: float, lo: float, span: float, config: GeneratorConfig) -> float:
    t_lo = config.calib_min + TEMPERATURE_MARGIN
    t_hi = config.calib_max - TEMPERATURE_MARGIN
    return t_lo + (log_radiance - lo) / span * (t_hi - t_lo)


def compose_scene(rng: np.random.Generator, config: GeneratorConfig) -> SceneLayout:
    """Sky gradient over textured ground plus objects carrying (radiance, temperature).

    The last two objects are anchors, a dark one in the left half and a bright
    one in the right half, so the radiance range always covers most of
    [radiance_min, radiance_max].
    """
    _check_config(config)
    size = config.size
    lo, hi = math.log10(config.radiance_min), math.log10(config.radiance_max)
    span = hi - lo
    ys = np.mgrid[0:size, 0:size][0] / max(size - 1, 1)
    horizon = rng.uniform(0.35, 0.55)
    sky = ys < horizon
    texture = _smooth_noise(rng, size, max(size / 32, 1.0))

    log_r = np.where(sky, lo + span * (0.55 + 0.15 * (1 - ys / horizon)), lo + span * (0.1 + 0.15 * texture))
    temperature = np.where(sky, config.calib_min + TEMPERATURE_MARGIN + 5 * ys, 5.0 + 20.0 * texture)
    tint = np.empty((size, size, 3))
    tint[sky] = (0.75, 0.9, 1.2)
    tint[~sky] = (1.1, 1.0, 0.8)

    n_decorrelated = int(round(config.decorrelated_fraction * config.n_objects))
    flags = np.array([True] * n_decorrelated + [False] * (config.n_objects - n_decorrelated))
    rng.shuffle(flags)

    objects: List[SceneObject] = []
    for decorrelated in flags:
        log_radiance = rng.uniform(lo, hi)
        if decorrelated:
            temp = rng.uniform(config.calib_min + TEMPERATURE_MARGIN, config.calib_max - TEMPERATURE_MARGIN)
        else:
            temp = _correlated_temperature(log_radiance, lo, span, config)
        objects.append(SceneObject(
            shape=str(rng.choice(["disk", "rect"])),
            center=(rng.uniform(0, size - 1), rng.uniform(0, size - 1)),
            radius=max(rng.uniform(0.06, 0.18) * size, 1.0),
            log_radiance=float(log_radiance),
            temperature=float(temp),
            decorrelated=bool(decorrelated),
        ))
    for half, (a, b) in ((0, (lo, lo + math.log10(3))), (1, (hi - math.log10(3), hi))):
        log_radiance = rng.uniform(a, b)
        objects.append(SceneObject(
            shape="disk",
            center=(rng.uniform(0.25, 0.75) * (size - 1), (0.25 + 0.5 * half) * (size - 1)),
            radius=max(0.08 * size, 1.0),
            log_radiance=float(log_radiance),
            temperature=float(_correlated_temperature(log_radiance, lo, span, config)),
            decorrelated=False,
        ))

    n_textured = len(objects) - 2
    for index, obj in enumerate(objects):
        mask = _object_mask(obj, size)
        detail = 0.05 * span * (texture[mask] - 0.5) if index < n_textured else 0.0
        log_r[mask] = np.clip(obj.log_radiance + detail, lo, hi)
        temperature[mask] = obj.temperature
        tint[mask] = rng.uniform(0.6, 1.2, size=3)

    tint = tint / (tint @ REC709)[..., None]
    radiance = RadianceImage((10.0 ** log_r)[..., None] * tint)
    temperature = np.clip(temperature, config.calib_min, config.calib_max)
    return SceneLayout(radiance, temperature, tuple(objects))


def generate_scene(seed, config: Optional[GeneratorConfig] = None) -> Tuple[RadianceImage, np.ndarray]:
    """Radiance map and temperature map (degrees Celsius) of one synthetic scene."""
    layout = compose_scene(np.random.default_rng(seed), config or GeneratorConfig())
    return layout.radiance, layout.temperature


def random_parallax(rng: np.random.Generator, size: int, max_px: float) -> Homography:
    """Homography moving each image corner by at most ``max_px`` along each axis."""
    if max_px <= 0:
        return Homography.identity()
    corners = np.array([[0, 0], [size - 1, 0], [size - 1, size - 1], [0, size - 1]], dtype=np.float64)
    moved = corners + rng.uniform(-max_px, max_px, size=corners.shape)
    return estimate_homography(CorrespondenceSet(np.hstack([corners, moved])))


def render_ir(
    temperature: np.ndarray, parallax: Homography, config: GeneratorConfig
) -> Tuple[IrImage, Homography]:
    """Thermal frame seen through ``parallax``; returns it with the IR-to-RGB homography."""
    blurred = ndimage.gaussian_filter(np.asarray(temperature, dtype=np.float64), config.ir_blur_sigma)
    s = config.ir_scale
    h = parallax @ Homography(np.diag([1.0 / s, 1.0 / s, 1.0]))
    ir_h = max(int(round(temperature.shape[0] * s)), 1)
    ir_w = max(int(round(temperature.shape[1] * s)), 1)
    warped, _ = warp_image(blurred, h.inverse(), ir_w, ir_h, mode="nearest")
    clipped = np.clip(warped, config.calib_min, config.calib_max)
    return IrImage(clipped, config.calib_min, config.calib_max), h


def keypoint_correspondences(h: Homography, ir_width: int, ir_height: int) -> CorrespondenceSet:
    """3x3 grid of IR keypoints paired with their exact RGB positions."""
    fractions = (0.2, 0.5, 0.8)
    source = np.array([[fx * (ir_width - 1), fy * (ir_height - 1)] for fy in fractions for fx in fractions])
    return CorrespondenceSet(np.hstack([source, h.apply(source)]))


def exposure_times(rng: np.random.Generator, scene: RadianceImage, config: GeneratorConfig) -> List[float]:
    """Middle exposure lands the scene in a uniformly drawn exposure class; the others are +-stops."""
    p25, p50, p75 = np.percentile(scene.data @ REC709, [25, 50, 75])
    anchors = [
        (config.under_key, p50),
        (config.well_key, math.sqrt(p25 * p75)),
        (config.over_key, p50),
    ]
    key, level = anchors[int(rng.integers(len(anchors)))]
    jitter = math.exp(rng.uniform(-1.0, 1.0) * math.log(config.key_jitter))
    middle = key * jitter / float(level)
    step = 2.0 ** config.exposure_stops
    return [middle / step, middle, middle * step]


def simulate_capture(
    scene: RadianceImage,
    temperature: np.ndarray,
    crf: Crf,
    exposures: List[float],
    parallax: Homography,
    noise_sigma: float,
    seed: int,
    scene_dir: PathLike,
    scene_id: str,
    config: Optional[GeneratorConfig] = None,
    prefix: str = "",
) -> SceneRecord:
    """Write brackets, IR frame, correspondences and ground truth for one scene."""
    config = config or GeneratorConfig()
    scene_dir = Path(scene_dir)
    bracket = simulate_bracket(scene, crf, exposures, noise_sigma=noise_sigma, seed=seed)
    ir, h = render_ir(temperature, parallax, config)

    write_image(scene, scene_dir / "hdr.pfm")
    sdr_names = []
    for index, frame in enumerate(bracket.frames):
        name = f"sdr_{index}.png"
        write_image(frame, scene_dir / name)
        sdr_names.append(name)
    write_image(ir, scene_dir / "ir.pgm")
    save_correspondences(keypoint_correspondences(h, ir.width, ir.height), scene_dir / "correspondences.json")

    middle = bracket.frames[len(bracket.frames) // 2]
    return SceneRecord(
        scene_id=scene_id,
        hdr_path=prefix + "hdr.pfm",
        sdr_paths=[prefix + name for name in sdr_names],
        ir_path=prefix + "ir.pgm",
        correspondence_path=prefix + "correspondences.json",
        exposure_times=list(bracket.exposure_times),
        exposure_class=classify_exposure(middle),
    )


def _build_scene(
    index: int, seed_seq: np.random.SeedSequence, config: GeneratorConfig, crf: Crf, out_dir: Path
) -> SceneRecord:
    scene_id = f"scene_{index:04d}"
    rng = np.random.default_rng(seed_seq)
    layout = compose_scene(rng, config)
    parallax = random_parallax(rng, config.size, config.max_parallax_px)
    exposures = exposure_times(rng, layout.radiance, config)
    noise_seed = int(rng.integers(2 ** 31))
    with get_storage().scene_transaction(out_dir / "scenes" / scene_id) as staging:
        record = simulate_capture(
            layout.radiance, layout.temperature, crf, exposures, parallax,
            config.noise_sigma, noise_seed, staging, scene_id, config,
            prefix=f"scenes/{scene_id}/",
        )
    logger.info(f"Generated {scene_id} ({record.exposure_class.value})")
    return record


def split_scenes(scene_ids: List[str], seed: int, train_fraction: float = settings.TRAIN_FRACTION) -> DatasetSplit:
    order = np.random.default_rng(seed).permutation(len(scene_ids))
    n_train = int(round(train_fraction * len(scene_ids)))
    shuffled = [scene_ids[i] for i in order]
    return DatasetSplit(train=sorted(shuffled[:n_train]), val=sorted(shuffled[n_train:]))


def build_dataset(
    n_scenes: int,
    out_dir: PathLike,
    config: Optional[GeneratorConfig] = None,
    seed: int = 0,
    workers: int = settings.DATA_WORKERS,
) -> Manifest:
    """Generate ``n_scenes`` scenes with per-scene seeds and write the manifest."""
    if n_scenes <= 0:
        raise DatasetError(f"need at least one scene, got {n_scenes}")
    config = config or GeneratorConfig()
    _check_config(config)
    out_dir = Path(out_dir)
    crf = Crf.gamma(config.crf_gamma)
    save_crf(crf, out_dir / CRF_NAME)
    seeds = np.random.SeedSequence(seed).spawn(n_scenes)

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(lambda i: _build_scene(i, seeds[i], config, crf, out_dir), range(n_scenes)))
        else:
            records = [_build_scene(i, seeds[i], config, crf, out_dir) for i in range(n_scenes)]
    except HdrtError as e:
        logger.error(f"Dataset generation failed: {e}")
        raise

    manifest = Manifest(
        scenes=records,
        split=split_scenes([r.scene_id for r in records], seed),
        generator_config=config,
        seed=seed,
        crf_path=CRF_NAME,
    )
    get_storage().write_json(out_dir / MANIFEST_NAME, manifest.model_dump(mode="json"))
    logger.info(f"Wrote dataset of {n_scenes} scenes to {out_dir} ({len(manifest.split.train)} train / {len(manifest.split.val)} val)")
    return manifest


def manifest_path(path: PathLike) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def load_manifest(path: PathLike) -> Manifest:
    return Manifest.model_validate(get_storage().read_json(manifest_path(path)))


def load_scene(root: PathLike, record: SceneRecord) -> LoadedScene:
    root = Path(root)
    frames = []
    for rel, dt in zip(record.sdr_paths, record.exposure_times):
        frame = read_image(root / rel)
        frames.append(SdrImage(frame.data, dt))
    return LoadedScene(
        record=record,
        hdr=read_image(root / record.hdr_path),
        bracket=Bracket(tuple(frames)),
        ir=read_image(root / record.ir_path),
        correspondences=load_correspondences(root / record.correspondence_path),
    )


def validate_manifest(root: PathLike, manifest: Manifest):
    """Resolve and parse every referenced file; raise DatasetError listing the failures."""
    problems = []
    known = {r.scene_id for r in manifest.scenes}
    for scene_id in manifest.split.train + manifest.split.val:
        if scene_id not in known:
            problems.append(f"split references unknown scene {scene_id}")
    for record in manifest.scenes:
        try:
            load_scene(root, record)
        except HdrtError as e:
            problems.append(f"{record.scene_id}: {e}")
    if problems:
        raise DatasetError("; ".join(problems))
