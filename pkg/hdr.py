"""Camera response recovery, multi-exposure merging and bracket simulation.

Camera model: a response ``g`` maps an 8-bit code ``z`` to log exposure,
anchored so that ``g[128] == 0``. The exposure relative to the sensor's
saturation point is ``exp(g[z] - g[255])``; a linear response therefore
sends E * dt == 1 to code 255. Simulation and merging use the same
convention, so merged radiance comes back in scene units.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.optimize import isotonic_regression

from config import settings
from errors import BracketError, InvalidResponseError, RankDeficientError, ShapeMismatchError
from imgio import REC709, RadianceImage, SdrImage
from models import CrfFile, ExposureClass
from storage import get_storage

logger = logging.getLogger(__name__)

CODES = np.arange(256)


def hat_weight(z):
    """Triangle weight: z for z <= 127, 255 - z above."""
    z = np.asarray(z)
    weight = np.where(z <= 127, z, 255 - z)
    return int(weight) if weight.ndim == 0 else weight


@dataclass(frozen=True, eq=False)
class Crf:
    """Log-exposure lookup ``g`` over the 256 codes of one channel."""

    g: np.ndarray
    smoothness: float = settings.CRF_LAMBDA

    def __post_init__(self):
        g = np.array(self.g, dtype=np.float64)
        if g.shape != (256,):
            raise InvalidResponseError(f"response needs 256 entries, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise InvalidResponseError("response values must be finite")
        if np.any(np.diff(g) < -1e-12):
            raise InvalidResponseError("response must be non-decreasing")
        if abs(g[128]) > 1e-9:
            raise InvalidResponseError(f"response must be anchored at g[128] == 0, got {g[128]}")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @classmethod
    def gamma(cls, gamma: float) -> "Crf":
        """Camera writing code = 255 * X^gamma, X the exposure relative to saturation."""
        if not gamma > 0:
            raise InvalidResponseError(f"gamma must be positive, got {gamma}")
        z = np.maximum(CODES, 0.5)
        g = (np.log(z / 255.0) - math.log(128 / 255.0)) / gamma
        return cls(g, smoothness=0.0)

    @classmethod
    def linear(cls) -> "Crf":
        return cls.gamma(1.0)

    def relative_exposure(self) -> np.ndarray:
        """Exposure of every code relative to the saturation code."""
        return np.exp(self.g - self.g[255])


CrfLike = Union[Crf, Sequence[Crf]]


def _per_channel(crf: CrfLike) -> List[Crf]:
    if isinstance(crf, Crf):
        return [crf, crf, crf]
    crfs = list(crf)
    if len(crfs) == 1:
        return crfs * 3
    if len(crfs) != 3:
        raise ShapeMismatchError(f"expected 1 or 3 response curves, got {len(crfs)}")
    return crfs


@dataclass(frozen=True, eq=False)
class Bracket:
    """SDR frames of one scene ordered by strictly increasing exposure time."""

    frames: Tuple[SdrImage, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise BracketError(f"a bracket needs at least 2 frames, got {len(frames)}")
        shape = frames[0].data.shape
        for frame in frames[1:]:
            if frame.data.shape != shape:
                raise ShapeMismatchError(f"bracket frames differ in size: {frame.data.shape} vs {shape}")
        times = [frame.exposure_time for frame in frames]
        for previous, current in zip(times, times[1:]):
            if current == previous:
                raise RankDeficientError(
                    f"repeated exposure time {current}s leaves the response slope undetermined"
                )
            if current < previous:
                raise BracketError(f"exposure times must increase, got {times}")
        object.__setattr__(self, "frames", frames)

    @property
    def exposure_times(self) -> np.ndarray:
        return np.array([frame.exposure_time for frame in self.frames])

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    def codes(self) -> np.ndarray:
        """Codes stacked as (frames, H, W, 3), int64."""
        return np.stack([frame.data for frame in self.frames]).astype(np.int64)


def _stratified_samples(frame: SdrImage, n_samples: int) -> np.ndarray:
    lum = frame.data.reshape(-1, 3).astype(np.float64) @ REC709
    order = np.argsort(lum, kind="stable")
    ranks = np.linspace(0, len(order) - 1, n_samples).round().astype(np.int64)
    return np.unique(order[ranks])


def _solve_response(samples: np.ndarray, ln_dt: np.ndarray, smoothness: float) -> np.ndarray:
    weights = hat_weight(samples).astype(np.float64)
    observed = (weights > 0).sum(axis=1)
    if not np.any(observed >= 2):
        raise RankDeficientError("no sampled pixel is unclipped in two exposures")
    samples, weights = samples[observed >= 1], weights[observed >= 1]
    n, frames = samples.shape

    # Rows carry sqrt weights so the squared residuals match the weighted objective
    n_data = n * frames
    A = np.zeros((n_data + 254, 256 + n))
    b = np.zeros(n_data + 254)
    rows = np.arange(n_data)
    pixel = np.repeat(np.arange(n), frames)
    frame = np.tile(np.arange(frames), n)
    root_w = np.sqrt(weights.ravel())
    A[rows, samples.ravel()] = root_w
    A[rows, 256 + pixel] = -root_w
    b[rows] = root_w * ln_dt[frame]

    z = np.arange(1, 255)
    root_s = np.sqrt(smoothness * hat_weight(z))
    smooth_rows = n_data + np.arange(254)
    A[smooth_rows, z - 1] = root_s
    A[smooth_rows, z] = -2.0 * root_s
    A[smooth_rows, z + 1] = root_s

    # g[128] = 0 is imposed by eliminating its column
    A = np.delete(A, 128, axis=1)
    try:
        factor = linalg.cho_factor(A.T @ A)
        x = linalg.cho_solve(factor, A.T @ b)
    except linalg.LinAlgError as e:
        raise RankDeficientError(f"response system is singular: {e}")
    if not np.all(np.isfinite(x)):
        raise RankDeficientError("response system produced non-finite values")
    return np.insert(x[:255], 128, 0.0)


def recover_crf(
    bracket: Bracket,
    smoothness: float = settings.CRF_LAMBDA,
    n_samples: int = settings.CRF_SAMPLES,
) -> List[Crf]:
    """Debevec least-squares response fit, one curve per colour channel."""
    n_frames = len(bracket.frames)
    required = math.ceil((255 + n_frames) / (n_frames - 1))
    n_samples = min(n_samples, bracket.width * bracket.height)
    if n_samples < required:
        raise BracketError(f"{n_samples} samples cannot overdetermine the system, need {required}")

    index = _stratified_samples(bracket.frames[n_frames // 2], n_samples)
    codes = bracket.codes().reshape(n_frames, -1, 3)
    ln_dt = np.log(bracket.exposure_times)
    crfs = []
    for channel in range(3):
        samples = codes[:, index, channel].T
        g = _solve_response(samples, ln_dt, smoothness)
        if np.any(np.diff(g) < 0):
            logger.debug(f"Projecting channel {channel} response onto monotone curves")
            g = isotonic_regression(g, increasing=True).x
        crfs.append(Crf(g - g[128], smoothness))
    logger.info(f"Recovered response curves from {len(index)} samples x {n_frames} exposures (lambda={smoothness})")
    return crfs


def merge_brackets(bracket: Bracket, crf: CrfLike) -> RadianceImage:
    """Weighted log-domain merge. Pixels with no usable exposure take the frame closest to mid-grey."""
    crfs = _per_channel(crf)
    codes = bracket.codes()
    ln_dt = np.log(bracket.exposure_times)[:, None, None]
    ln_e = np.empty(codes.shape[1:], dtype=np.float64)
    for channel, response in enumerate(crfs):
        z = codes[..., channel]
        ln_x = response.g[z] - response.g[255] - ln_dt
        weight = hat_weight(z)
        total = weight.sum(axis=0)
        estimate = (weight * ln_x).sum(axis=0) / np.where(total > 0, total, 1)
        nearest = np.argmin(np.abs(z - 128), axis=0)
        fallback = np.take_along_axis(ln_x, nearest[None], axis=0)[0]
        ln_e[..., channel] = np.where(total > 0, estimate, fallback)
    clipped = saturation_mask(bracket)
    if clipped.any():
        logger.info(f"{int(clipped.sum())} pixels had no usable exposure and used the fallback frame")
    return RadianceImage(np.exp(ln_e))


def saturation_mask(bracket: Bracket) -> np.ndarray:
    """Pixels where some channel has zero total weight across the bracket."""
    return (hat_weight(bracket.codes()).sum(axis=0) == 0).any(axis=2)


def simulate_bracket(
    scene: RadianceImage,
    crf: CrfLike,
    exposure_times: Sequence[float],
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> Bracket:
    """Render SDR frames of a radiance map through a camera response."""
    times = [float(t) for t in exposure_times]
    if any(t <= 0 for t in times):
        raise BracketError(f"exposure times must be positive, got {times}")
    if noise_sigma < 0:
        raise BracketError(f"noise sigma must be non-negative, got {noise_sigma}")
    crfs = _per_channel(crf)
    rng = np.random.default_rng(seed)
    frames = []
    for dt in times:
        codes = np.empty(scene.data.shape, dtype=np.float64)
        for channel, response in enumerate(crfs):
            exposure = scene.data[..., channel].astype(np.float64) * dt
            codes[..., channel] = np.interp(exposure, response.relative_exposure(), CODES)
        codes = np.rint(codes)
        if noise_sigma > 0:
            codes = np.rint(codes + rng.normal(0.0, noise_sigma, codes.shape))
        frames.append(SdrImage(np.clip(codes, 0, 255).astype(np.uint8), dt))
    return Bracket(tuple(frames))


def classify_exposure(frame: SdrImage, threshold: float = 0.25) -> ExposureClass:
    """over: more than ``threshold`` of pixels clipped at 255; under: the same at 0."""
    peak = frame.data.max(axis=2)
    if np.mean(peak == 255) > threshold:
        return ExposureClass.OVER
    if np.mean(peak == 0) > threshold:
        return ExposureClass.UNDER
    return ExposureClass.WELL


def save_crf(crf: CrfLike, path: Union[str, Path]) -> Path:
    crfs = [crf] if isinstance(crf, Crf) else list(crf)
    document = CrfFile(smoothness=crfs[0].smoothness, channels=[c.g.tolist() for c in crfs])
    return get_storage().write_json(path, document.model_dump(by_alias=True))


def load_crf(path: Union[str, Path]) -> List[Crf]:
    document = CrfFile.model_validate(get_storage().read_json(path))
    return [Crf(np.array(g), document.smoothness) for g in document.channels]
