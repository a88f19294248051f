from pydantic_settings import BaseSettings
from typing import List

class Settings(BaseSettings):
    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Thermal camera calibration (degrees Celsius)
    IR_CALIB_MIN: float = -20.0
    IR_CALIB_MAX: float = 100.0

    # Camera response recovery
    CRF_LAMBDA: float = 50.0
    CRF_SAMPLES: int = 256

    # Metrics
    PEAK_LUMINANCE: float = 1000.0
    PSNR_CAP_DB: float = 100.0
    PU21_VARIANT: str = "banding_glare"

    # Tone mapping
    TONEMAP_SIGMA_S_FRACTION: float = 0.02
    TONEMAP_SIGMA_R: float = 0.4
    TONEMAP_CONTRAST: float = 1.5
    TONEMAP_SATURATION: float = 0.6
    TONEMAP_GAMMA: float = 2.2

    # Training
    LEARNING_RATE: float = 1e-3
    LR_HALVE_EVERY: int = 20000
    LOSS_ALPHA: float = 1.0
    LOSS_BETA: float = 1e-5
    CROP_SIZE: int = 64
    BATCH_SIZE: int = 8
    TRAIN_STEPS: int = 2000
    UNET_WIDTHS: str = "8,16,32,64"
    DISC_WIDTH: int = 8
    PERCEPTUAL_SEED: int = 1234
    LOG_EVERY: int = 50

    # Dataset generation
    SCENE_SIZE: int = 96
    DATA_WORKERS: int = 1
    TRAIN_FRACTION: float = 0.8

    class Config:
        env_file = ".env"
        case_sensitive = True

    @property
    def unet_widths_list(self) -> List[int]:
        return [int(width.strip()) for width in self.UNET_WIDTHS.split(",")]

settings = Settings()
