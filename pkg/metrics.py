"""Perceptually uniform HDR quality metrics: pu-PSNR, pu-SSIM and pu-VSI.

Relative radiance is mapped to absolute luminance by scaling the
reference maximum to ``peak_luminance`` cd/m^2, then PU21-encoded.
"""
import csv
import io
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage, signal

from config import settings
from errors import ShapeMismatchError
from imgio import RadianceImage, luminance
from models import ExposureClass, MetricReport, MetricRow
from storage import get_storage

logger = logging.getLogger(__name__)

PU_MIN_LUMINANCE = 0.005
PU_MAX_LUMINANCE = 10000.0

PU21_PARAMETERS = {
    "banding": [1.070275272, 0.4088273932, 0.153224308, 0.2520326168, 1.063512885, 1.14115047, 521.4527484],
    "banding_glare": [0.353487901, 0.3734658629, 8.277049286e-05, 0.9062562627, 0.09150303166, 0.9099517204, 596.3148142],
    "peaks": [1.043882782, 0.6459495343, 0.3194584211, 0.374025247, 1.114783422, 1.095360363, 384.9217577],
    "peaks_glare": [816.885024, 1479.463946, 0.001253215609, 0.9329636822, 0.06746643971, 1.573435413, 419.6006374],
}

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# Saliency-index constants
VSI_C_VS = 1.27
VSI_C_GM = 386.0
VSI_C_C = 130.0
VSI_ALPHA = 0.40
VSI_LAMBDA = 0.020
SDSP_SIGMA_F = 1.34
SDSP_OMEGA0 = 0.021
SDSP_SIGMA_D = 145.0
SDSP_SIGMA_C = 0.001
SDSP_SIZE = 256

CSV_COLUMNS = ["scene_id", "exposure_class", "pu_psnr", "pu_ssim", "pu_vsi"]


def _pu_parameters(variant: str) -> np.ndarray:
    try:
        return np.array(PU21_PARAMETERS[variant])
    except KeyError:
        raise ValueError(f"Unknown PU21 variant: {variant}")


def pu21_encode(y, variant: str = settings.PU21_VARIANT) -> np.ndarray:
    """Absolute luminance (cd/m^2) to PU21 values; 100 cd/m^2 lands near 256."""
    p = _pu_parameters(variant)
    y = np.clip(np.asarray(y, dtype=np.float64), PU_MIN_LUMINANCE, PU_MAX_LUMINANCE)
    yp = y ** p[3]
    return np.maximum(p[6] * (((p[0] + p[1] * yp) / (1 + p[2] * yp)) ** p[4] - p[5]), 0.0)


def pu21_decode(v, variant: str = settings.PU21_VARIANT) -> np.ndarray:
    p = _pu_parameters(variant)
    v = np.asarray(v, dtype=np.float64)
    vp = np.maximum(v / p[6] + p[5], 0.0) ** (1 / p[4])
    return (np.maximum(vp - p[0], 0.0) / (p[1] - p[2] * vp)) ** (1 / p[3])


def pu_range(peak_luminance: float = settings.PEAK_LUMINANCE, variant: str = settings.PU21_VARIANT) -> float:
    return float(pu21_encode(peak_luminance, variant) - pu21_encode(PU_MIN_LUMINANCE, variant))


def display_scale(ref: RadianceImage, peak_luminance: float = settings.PEAK_LUMINANCE) -> float:
    """Factor taking the reference maximum to ``peak_luminance``."""
    top = float(ref.data.max())
    if top <= 0:
        logger.warning("Reference image is black; using unit display scale")
        return 1.0
    return peak_luminance / top


def _check_pair(test: RadianceImage, ref: RadianceImage):
    if test.data.shape != ref.data.shape:
        raise ShapeMismatchError(f"test is {test.width}x{test.height} but reference is {ref.width}x{ref.height}")


def _encode_pair(test: RadianceImage, ref: RadianceImage, peak_luminance: float, channels: bool):
    _check_pair(test, ref)
    scale = display_scale(ref, peak_luminance)
    if channels:
        return pu21_encode(test.data * scale), pu21_encode(ref.data * scale)
    return pu21_encode(luminance(test) * scale), pu21_encode(luminance(ref) * scale)


def psnr(test_enc: np.ndarray, ref_enc: np.ndarray, data_range: float, cap: float = settings.PSNR_CAP_DB) -> float:
    mse = float(np.mean((np.asarray(test_enc, dtype=np.float64) - ref_enc) ** 2))
    if mse == 0:
        return cap
    value = 10.0 * math.log10(data_range ** 2 / mse)
    return float(min(max(value, 0.0), cap))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2
    kernel = np.exp(-(offsets ** 2) / (2 * sigma ** 2))
    kernel /= kernel.sum()
    return np.outer(kernel, kernel)


def ssim(test_enc: np.ndarray, ref_enc: np.ndarray, data_range: float) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows of two single-channel images."""
    img1 = np.asarray(test_enc, dtype=np.float64)
    img2 = np.asarray(ref_enc, dtype=np.float64)
    if img1.shape != img2.shape:
        raise ShapeMismatchError(f"SSIM operands differ: {img1.shape} vs {img2.shape}")
    if min(img1.shape) < SSIM_WINDOW:
        raise ShapeMismatchError(f"image {img1.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    window = _gaussian_window()

    def filt(x):
        return signal.convolve2d(x, window, mode="valid")

    mu1, mu2 = filt(img1), filt(img2)
    mu1_sq, mu2_sq, mu1_mu2 = mu1 ** 2, mu2 ** 2, mu1 * mu2
    sigma1_sq = filt(img1 ** 2) - mu1_sq
    sigma2_sq = filt(img2 ** 2) - mu2_sq
    sigma12 = filt(img1 * img2) - mu1_mu2
    ssim_map = ((2 * mu1_mu2 + c1) * (2 * sigma12 + c2)) / ((mu1_sq + mu2_sq + c1) * (sigma1_sq + sigma2_sq + c2))
    return float(np.clip(ssim_map.mean(), 0.0, 1.0))


def _srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Lab of 0..255 sRGB values under a D65 white."""
    c = rgb / 255.0
    linear = np.where(c > 0.04045, ((c + 0.055) / 1.055) ** 2.4, c / 12.92)
    to_xyz = np.array([
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ])
    xyz = linear @ to_xyz.T / np.array([0.950428545, 1.0, 1.088900371])
    delta = 6 / 29
    f = np.where(xyz > delta ** 3, np.cbrt(xyz), xyz / (3 * delta ** 2) + 4 / 29)
    lab = np.empty_like(f)
    lab[..., 0] = 116 * f[..., 1] - 16
    lab[..., 1] = 500 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200 * (f[..., 1] - f[..., 2])
    return lab


def _log_gabor(rows: int, cols: int, omega0: float, sigma_f: float) -> np.ndarray:
    u1 = (np.arange(1, cols + 1) - (cols // 2 + 1)) / (cols - cols % 2)
    u2 = (np.arange(1, rows + 1) - (rows // 2 + 1)) / (rows - rows % 2)
    u1, u2 = np.meshgrid(u1, u2)
    outside = u1 ** 2 + u2 ** 2 > 0.25
    u1[outside] = 0.0
    u2[outside] = 0.0
    radius = np.sqrt(np.fft.ifftshift(u1) ** 2 + np.fft.ifftshift(u2) ** 2)
    radius[0, 0] = 1.0
    lg = np.exp(-(np.log(radius / omega0) ** 2) / (2 * sigma_f ** 2))
    lg[0, 0] = 0.0
    return lg


def _unit_range(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min()
    return (x - x.min()) / span if span > 0 else np.zeros_like(x)


def sdsp_saliency(rgb: np.ndarray) -> np.ndarray:
    """Saliency from band-pass frequency, centre and warm-colour priors, scaled to [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    rows, cols = rgb.shape[:2]
    small = ndimage.zoom(rgb, (SDSP_SIZE / rows, SDSP_SIZE / cols, 1), order=1)
    lab = _srgb_to_lab(small)
    lg = _log_gabor(SDSP_SIZE, SDSP_SIZE, SDSP_OMEGA0, SDSP_SIGMA_F)
    filtered = [np.real(np.fft.ifft2(np.fft.fft2(lab[..., k]) * lg)) for k in range(3)]
    frequency = np.sqrt(sum(f ** 2 for f in filtered))

    y, x = np.mgrid[1:SDSP_SIZE + 1, 1:SDSP_SIZE + 1]
    centre = np.exp(-((y - SDSP_SIZE / 2) ** 2 + (x - SDSP_SIZE / 2) ** 2) / SDSP_SIGMA_D ** 2)

    a, b = _unit_range(lab[..., 1]), _unit_range(lab[..., 2])
    warmth = 1 - np.exp(-(a ** 2 + b ** 2) / SDSP_SIGMA_C ** 2)

    saliency = frequency * centre * warmth
    saliency = ndimage.zoom(saliency, (rows / SDSP_SIZE, cols / SDSP_SIZE), order=1)
    return _unit_range(saliency)


def vsi(test_enc: np.ndarray, ref_enc: np.ndarray) -> float:
    """Visual saliency-induced index of two RGB arrays on a 0..255-like scale."""
    img1 = np.asarray(test_enc, dtype=np.float64)
    img2 = np.asarray(ref_enc, dtype=np.float64)
    if img1.shape != img2.shape or img1.ndim != 3 or img1.shape[2] != 3:
        raise ShapeMismatchError(f"VSI needs two equal RGB arrays, got {img1.shape} and {img2.shape}")
    vs1, vs2 = sdsp_saliency(img1), sdsp_saliency(img2)
    rows, cols = img1.shape[:2]

    def lmn(img):
        r, g, b = img[..., 0], img[..., 1], img[..., 2]
        return 0.06 * r + 0.63 * g + 0.27 * b, 0.30 * r + 0.04 * g - 0.35 * b, 0.34 * r - 0.60 * g + 0.17 * b

    factor = max(1, round(min(rows, cols) / 256))
    average = np.ones((factor, factor)) / factor ** 2

    def down(x):
        return signal.convolve2d(x, average, mode="same")[::factor, ::factor]

    l1, m1, n1 = (down(c) for c in lmn(img1))
    l2, m2, n2 = (down(c) for c in lmn(img2))
    vs1, vs2 = down(vs1), down(vs2)

    dx = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]]) / 16
    dy = dx.T

    def gradient(x):
        return np.sqrt(signal.convolve2d(x, dx, mode="same") ** 2 + signal.convolve2d(x, dy, mode="same") ** 2)

    g1, g2 = gradient(l1), gradient(l2)
    s_vs = (2 * vs1 * vs2 + VSI_C_VS) / (vs1 ** 2 + vs2 ** 2 + VSI_C_VS)
    s_gm = (2 * g1 * g2 + VSI_C_GM) / (g1 ** 2 + g2 ** 2 + VSI_C_GM)
    s_m = (2 * m1 * m2 + VSI_C_C) / (m1 ** 2 + m2 ** 2 + VSI_C_C)
    s_n = (2 * n1 * n2 + VSI_C_C) / (n1 ** 2 + n2 ** 2 + VSI_C_C)
    # Negative chroma products take the real part of the complex power
    s_c = np.real(np.power((s_m * s_n).astype(np.complex128), VSI_LAMBDA))
    weight = np.maximum(vs1, vs2)
    if weight.sum() == 0:
        weight = np.ones_like(weight)
    score = np.sum(s_gm ** VSI_ALPHA * s_vs * s_c * weight) / np.sum(weight)
    return float(np.clip(score, 0.0, 1.0))


def pu_psnr(test: RadianceImage, ref: RadianceImage, peak_luminance: float = settings.PEAK_LUMINANCE) -> float:
    test_enc, ref_enc = _encode_pair(test, ref, peak_luminance, channels=True)
    return psnr(test_enc, ref_enc, pu_range(peak_luminance))


def pu_ssim(test: RadianceImage, ref: RadianceImage, peak_luminance: float = settings.PEAK_LUMINANCE) -> float:
    test_enc, ref_enc = _encode_pair(test, ref, peak_luminance, channels=False)
    return ssim(test_enc, ref_enc, pu_range(peak_luminance))


def pu_vsi(test: RadianceImage, ref: RadianceImage, peak_luminance: float = settings.PEAK_LUMINANCE) -> float:
    test_enc, ref_enc = _encode_pair(test, ref, peak_luminance, channels=True)
    return vsi(test_enc, ref_enc)


def evaluate(
    test: RadianceImage,
    ref: RadianceImage,
    peak_luminance: float = settings.PEAK_LUMINANCE,
    saturation_mask: Optional[np.ndarray] = None,
) -> MetricReport:
    report = MetricReport(
        pu_psnr=pu_psnr(test, ref, peak_luminance),
        pu_ssim=pu_ssim(test, ref, peak_luminance),
        pu_vsi=pu_vsi(test, ref, peak_luminance),
        pixel_count=ref.width * ref.height,
        saturated_fraction=float(np.mean(saturation_mask)) if saturation_mask is not None else 0.0,
        peak_luminance=peak_luminance,
        pu_variant=settings.PU21_VARIANT,
    )
    logger.debug(f"pu-PSNR {report.pu_psnr:.3f} pu-SSIM {report.pu_ssim:.4f} pu-VSI {report.pu_vsi:.4f}")
    return report


def metric_rows_to_csv(rows: Sequence[MetricRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([
            row.scene_id,
            row.exposure_class.value,
            f"{row.pu_psnr:.4f}",
            f"{row.pu_ssim:.6f}",
            f"{row.pu_vsi:.6f}",
        ])
    return buffer.getvalue()


def write_metric_rows(rows: Sequence[MetricRow], path: Union[str, Path]) -> Path:
    return get_storage().write_text(path, metric_rows_to_csv(rows))


def read_metric_rows(path: Union[str, Path]) -> List[MetricRow]:
    text = get_storage().read_bytes(path).decode("utf-8")
    return [MetricRow.model_validate(record) for record in csv.DictReader(io.StringIO(text))]


def summarize_rows(rows: Sequence[MetricRow]) -> Dict[str, Dict[str, float]]:
    """Per-group means for the over, under and all groups; empty groups are omitted."""
    groups = {
        ExposureClass.OVER.value: [r for r in rows if r.exposure_class == ExposureClass.OVER],
        ExposureClass.UNDER.value: [r for r in rows if r.exposure_class == ExposureClass.UNDER],
        "all": list(rows),
    }
    summary = {}
    for name, members in groups.items():
        if not members:
            continue
        summary[name] = {
            "count": float(len(members)),
            "pu_psnr": float(np.mean([r.pu_psnr for r in members])),
            "pu_ssim": float(np.mean([r.pu_ssim for r in members])),
            "pu_vsi": float(np.mean([r.pu_vsi for r in members])),
        }
    return summary
