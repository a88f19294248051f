from typing import Optional, List, Dict
from pydantic import BaseModel, Field, ConfigDict, field_validator, model_validator
from enum import Enum

from config import settings

class ImageFormat(str, Enum):
    RGBE = "rgbe"
    PFM = "pfm"
    PNG = "png"
    PPM = "ppm"
    PGM16 = "pgm16"

class ExposureClass(str, Enum):
    OVER = "over"
    UNDER = "under"
    WELL = "well"

class AblationKind(str, Enum):
    RGB = "rgb"
    PIXEL = "pixel"
    COMBINED = "combined"
    FULL = "full"

# File sidecars
class SidecarMetadata(BaseModel):
    exposure_time: Optional[float] = None
    calib_min: Optional[float] = None
    calib_max: Optional[float] = None

class CorrespondenceFile(BaseModel):
    pairs: List[List[float]]

    @field_validator("pairs")
    @classmethod
    def four_numbers_per_pair(cls, pairs: List[List[float]]) -> List[List[float]]:
        for pair in pairs:
            if len(pair) != 4:
                raise ValueError(f"each pair must be [sx, sy, tx, ty], got {pair}")
        return pairs

class CrfFile(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    smoothness: float = Field(alias="lambda")
    channels: List[List[float]]

    @field_validator("channels")
    @classmethod
    def full_code_axis(cls, channels: List[List[float]]) -> List[List[float]]:
        if len(channels) not in (1, 3):
            raise ValueError("expected 1 or 3 response channels")
        for g in channels:
            if len(g) != 256:
                raise ValueError("each response channel needs 256 entries")
        return channels

# Dataset models
class GeneratorConfig(BaseModel):
    size: int = settings.SCENE_SIZE
    radiance_min: float = 1e-2
    radiance_max: float = 1e3
    n_objects: int = 6
    decorrelated_fraction: float = 0.3
    ir_blur_sigma: float = 1.5
    ir_scale: float = 1.0
    max_parallax_px: float = 8.0
    exposure_stops: float = 2.0
    under_key: float = 4e-7
    well_key: float = 1e-2
    over_key: float = 2.0
    key_jitter: float = 1.25
    noise_sigma: float = 0.5
    crf_gamma: float = 1 / 2.2
    calib_min: float = settings.IR_CALIB_MIN
    calib_max: float = settings.IR_CALIB_MAX

class SceneRecord(BaseModel):
    scene_id: str
    hdr_path: str
    sdr_paths: List[str]
    ir_path: str
    correspondence_path: str
    exposure_times: List[float]
    exposure_class: ExposureClass

    @model_validator(mode="after")
    def brackets_ordered(self) -> "SceneRecord":
        if len(self.sdr_paths) != len(self.exposure_times):
            raise ValueError("one exposure time per bracket frame is required")
        if any(b <= a for a, b in zip(self.exposure_times, self.exposure_times[1:])):
            raise ValueError("brackets must be ordered by increasing exposure")
        return self

class DatasetSplit(BaseModel):
    train: List[str] = []
    val: List[str] = []

class Manifest(BaseModel):
    scenes: List[SceneRecord]
    split: DatasetSplit
    generator_config: GeneratorConfig
    seed: int
    crf_path: str

    def scene(self, scene_id: str) -> SceneRecord:
        for record in self.scenes:
            if record.scene_id == scene_id:
                return record
        raise KeyError(scene_id)

# Metric models
class MetricReport(BaseModel):
    pu_psnr: float = Field(ge=0.0)
    pu_ssim: float = Field(ge=0.0, le=1.0)
    pu_vsi: float = Field(ge=0.0, le=1.0)
    pixel_count: int
    saturated_fraction: float = 0.0
    peak_luminance: float
    pu_variant: str = settings.PU21_VARIANT

class MetricRow(BaseModel):
    scene_id: str
    exposure_class: ExposureClass
    pu_psnr: float = Field(ge=0.0)
    pu_ssim: float
    pu_vsi: float

# Network and training models
class UNetSpec(BaseModel):
    in_channels: int
    out_channels: int
    widths: List[int] = Field(default_factory=lambda: settings.unet_widths_list)
    fusion_points: List[int] = []
    ir_widths: Optional[List[int]] = None

    @model_validator(mode="after")
    def four_doubling_stages(self) -> "UNetSpec":
        if len(self.widths) != 4:
            raise ValueError("a U-Net has exactly four encoder stage widths")
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if any(b != 2 * a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must double from stage to stage")
        if any(p not in (0, 1, 2, 3) for p in self.fusion_points):
            raise ValueError("fusion points are encoder stages 0..3")
        self.fusion_points = sorted(set(self.fusion_points))
        if self.fusion_points and self.ir_widths is None:
            self.ir_widths = list(self.widths)
        return self

class LossWeights(BaseModel):
    alpha: float = settings.LOSS_ALPHA
    beta: float = settings.LOSS_BETA

class TrainConfig(BaseModel):
    steps: int = settings.TRAIN_STEPS
    batch_size: int = settings.BATCH_SIZE
    crop_size: int = settings.CROP_SIZE
    lr: float = settings.LEARNING_RATE
    lr_halve_every: int = settings.LR_HALVE_EVERY
    loss: LossWeights = Field(default_factory=LossWeights)
    widths: List[int] = Field(default_factory=lambda: settings.unet_widths_list)
    fusion_points: List[int] = [0, 1, 2, 3]
    disc_width: int = settings.DISC_WIDTH
    perceptual_seed: int = settings.PERCEPTUAL_SEED
    log_every: int = settings.LOG_EVERY
    seed: int = 0

    @field_validator("crop_size")
    @classmethod
    def crop_divisible_by_16(cls, crop_size: int) -> int:
        if crop_size <= 0 or crop_size % 16:
            raise ValueError("crop size must be a positive multiple of 16")
        return crop_size

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Settings defaults: 64 px crops, widths 8..64 and lr 1e-3, enough to fit a small synthetic set."""
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        values = dict(
            steps=200000,
            batch_size=8,
            crop_size=256,
            lr=4e-5,
            lr_halve_every=20000,
            widths=[64, 128, 256, 512],
            disc_width=64,
        )
        values.update(overrides)
        return cls(**values)

class TrainLogRow(BaseModel):
    step: int
    l_pix: float
    l_per: float
    l_gan: float
    lr: float

# Checkpoint models
class CheckpointEntry(BaseModel):
    name: str
    shape: List[int]
    frozen: bool = False
    buffer: bool = False

class CheckpointManifest(BaseModel):
    dtype: str = "float32"
    entries: List[CheckpointEntry]
    metadata: Dict[str, object] = {}
