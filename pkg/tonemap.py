import logging
import math
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from config import settings
from errors import ToneMapError
from imgio import RadianceImage, SdrImage, luminance

logger = logging.getLogger(__name__)

# Cells of zero padding around the bilateral grid
GRID_PADDING = 2

# Grid cells per sigma along each axis
GRID_SUBDIVISIONS = 3

# Splatting and slicing are both trilinear hats (variance 1/6 cell^2 each),
# so the grid blur only adds the remainder of a Gaussian of one sigma.
GRID_BLUR_SIGMA = math.sqrt(GRID_SUBDIVISIONS ** 2 - 1.0 / 3.0)


def _check_filter_args(img: np.ndarray, sigma_s: float, sigma_r: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"bilateral filtering expects a single-channel image, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("bilateral filter input must be finite")
    if not (sigma_s > 0 and sigma_r > 0):
        raise ValueError(f"sigmas must be positive, got sigma_s={sigma_s} sigma_r={sigma_r}")
    return img


def bilateral_filter_fast(img: np.ndarray, sigma_s: float, sigma_r: float) -> np.ndarray:
    """Bilateral grid approximation; cells are a third of sigma_s pixels by a third of sigma_r."""
    img = _check_filter_args(img, sigma_s, sigma_r)
    height, width = img.shape
    low = img.min()
    cell_s, cell_r = sigma_s / GRID_SUBDIVISIONS, sigma_r / GRID_SUBDIVISIONS
    ys, xs = np.mgrid[0:height, 0:width]
    coords = np.stack([
        ys / cell_s + GRID_PADDING,
        xs / cell_s + GRID_PADDING,
        (img - low) / cell_r + GRID_PADDING,
    ])
    shape = tuple(int(math.ceil(coords[k].max())) + GRID_PADDING + 2 for k in range(3))
    values = np.zeros(shape)
    weights = np.zeros(shape)

    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    for corner in range(8):
        offset = [(corner >> axis) & 1 for axis in range(3)]
        w = np.ones_like(img)
        for axis in range(3):
            w = w * (frac[axis] if offset[axis] else 1.0 - frac[axis])
        index = tuple((base[axis] + offset[axis]).ravel() for axis in range(3))
        np.add.at(values, index, (w * img).ravel())
        np.add.at(weights, index, w.ravel())

    values = ndimage.gaussian_filter(values, GRID_BLUR_SIGMA, mode="constant")
    weights = ndimage.gaussian_filter(weights, GRID_BLUR_SIGMA, mode="constant")

    sliced_values = ndimage.map_coordinates(values, coords, order=1)
    sliced_weights = ndimage.map_coordinates(weights, coords, order=1)
    return np.where(sliced_weights > 1e-12, sliced_values / np.maximum(sliced_weights, 1e-12), img)


def bilateral_filter_exact(img: np.ndarray, sigma_s: float, sigma_r: float) -> np.ndarray:
    """Brute-force bilateral filter over a (6 sigma_s + 1)^2 window. Slow; meant for small images."""
    img = _check_filter_args(img, sigma_s, sigma_r)
    radius = int(math.ceil(3 * sigma_s))
    padded = np.pad(img, radius, mode="constant", constant_values=np.nan)
    height, width = img.shape
    total = np.zeros_like(img)
    norm = np.zeros_like(img)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[radius + dy:radius + dy + height, radius + dx:radius + dx + width]
            valid = np.isfinite(shifted)
            neighbour = np.where(valid, shifted, 0.0)
            w = np.exp(-(dy * dy + dx * dx) / (2 * sigma_s ** 2) - (neighbour - img) ** 2 / (2 * sigma_r ** 2))
            w = np.where(valid, w, 0.0)
            total += w * neighbour
            norm += w
    return total / norm


def default_sigma_s(width: int, height: int) -> float:
    return settings.TONEMAP_SIGMA_S_FRACTION * math.hypot(width, height)


def durand_decompose(
    log_y: np.ndarray, sigma_s: float, sigma_r: float = settings.TONEMAP_SIGMA_R
) -> Tuple[np.ndarray, np.ndarray]:
    """Split log10 luminance into (base, detail)."""
    base = bilateral_filter_fast(log_y, sigma_s, sigma_r)
    return base, np.asarray(log_y, dtype=np.float64) - base


def _log_luminance(scene: RadianceImage) -> Tuple[np.ndarray, np.ndarray]:
    y = luminance(scene)
    peak = float(y.max())
    if peak <= 0:
        raise ToneMapError("scene has no positive luminance")
    floor = peak * 1e-8
    return np.log10(np.maximum(y, floor)), np.maximum(y, floor)


def durand_log_luminance(
    scene: RadianceImage,
    target_contrast: float = settings.TONEMAP_CONTRAST,
    sigma_s: Optional[float] = None,
    sigma_r: float = settings.TONEMAP_SIGMA_R,
) -> np.ndarray:
    """Compressed log10 display luminance, maximum of the base layer at 0."""
    log_y, _ = _log_luminance(scene)
    if sigma_s is None:
        sigma_s = default_sigma_s(scene.width, scene.height)
    base, detail = durand_decompose(log_y, sigma_s, sigma_r)
    p1, p99 = np.percentile(base, [1, 99])
    spread = p99 - p1
    scale = target_contrast / spread if spread > 1e-6 else 1.0
    logger.debug(f"Base range {spread:.3f} log10 units, compression {scale:.4f}")
    compressed = scale * base
    return compressed + detail - compressed.max()


def durand_tonemap(
    scene: RadianceImage,
    target_contrast: float = settings.TONEMAP_CONTRAST,
    saturation: float = settings.TONEMAP_SATURATION,
    sigma_s: Optional[float] = None,
    sigma_r: float = settings.TONEMAP_SIGMA_R,
    gamma: float = settings.TONEMAP_GAMMA,
) -> SdrImage:
    """Durand bilateral tone mapping to 8-bit display codes."""
    _, y = _log_luminance(scene)
    log_out = durand_log_luminance(scene, target_contrast, sigma_s, sigma_r)
    ratio = scene.data.astype(np.float64) / y[..., None]
    rgb = ratio ** saturation * (10.0 ** log_out)[..., None]
    encoded = np.clip(rgb, 0.0, 1.0) ** (1.0 / gamma)
    codes = np.clip(np.rint(encoded * 255.0), 0, 255).astype(np.uint8)
    logger.info(f"Tone mapped {scene.width}x{scene.height} scene (contrast={target_contrast}, saturation={saturation})")
    return SdrImage(codes)
