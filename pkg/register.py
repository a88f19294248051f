"""Homography registration of IR frames onto RGB frames and overlap cropping.

Correspondences map IR (source) pixel coordinates to RGB (target) pixel
coordinates; pixel centres sit on integer coordinates, x along columns.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares

from errors import DegenerateConfigurationError, EmptyOverlapError, ShapeMismatchError
from imgio import AnyImage, IrImage, RadianceImage, SdrImage, crop_image
from models import CorrespondenceFile
from storage import get_storage

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class Homography:
    """Projective map normalized so that m[2, 2] == 1."""

    m: np.ndarray
    rmse: float = 0.0

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise DegenerateConfigurationError("homography entries must be finite")
        if abs(m[2, 2]) < 1e-12:
            raise DegenerateConfigurationError("homography cannot be normalized, m[2][2] is zero")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) < 1e-12:
            raise DegenerateConfigurationError("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: "Homography") -> "Homography":
        # (a @ b) applies b first
        return Homography(self.m @ other.m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) points; returns (N, 2)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        mapped = np.column_stack([points, np.ones(len(points))]) @ self.m.T
        return mapped[:, :2] / mapped[:, 2:3]

    def to_list(self) -> List[float]:
        return self.m.ravel().tolist()


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Point pairs stored as rows [sx, sy, tx, ty]."""

    pairs: np.ndarray

    def __post_init__(self):
        pairs = np.array(self.pairs, dtype=np.float64)
        if pairs.ndim != 2 or pairs.shape[1] != 4:
            raise DegenerateConfigurationError(f"pairs must be rows of [sx, sy, tx, ty], got shape {pairs.shape}")
        if len(pairs) < 4:
            raise DegenerateConfigurationError(f"a homography needs at least 4 pairs, got {len(pairs)}")
        if not np.all(np.isfinite(pairs)):
            raise DegenerateConfigurationError("correspondence coordinates must be finite")
        if len(pairs) == 4 and _has_collinear_triple(pairs[:, :2]):
            raise DegenerateConfigurationError("three of the four source points are collinear")
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)

    @property
    def source(self) -> np.ndarray:
        return self.pairs[:, :2]

    @property
    def target(self) -> np.ndarray:
        return self.pairs[:, 2:]

    def __len__(self) -> int:
        return len(self.pairs)


def _has_collinear_triple(points: np.ndarray) -> bool:
    extent = max(np.ptp(points, axis=0).max(), 1.0)
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            for k in range(j + 1, len(points)):
                u, v = points[j] - points[i], points[k] - points[i]
                if abs(u[0] * v[1] - u[1] * v[0]) <= 1e-9 * extent * extent:
                    return True
    return False


def _normalizer(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    centroid = points.mean(axis=0)
    spread = np.linalg.norm(points - centroid, axis=1).mean()
    if spread == 0:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2) / spread
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _dlt(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    t_src, t_dst = _normalizer(source), _normalizer(target)
    src = Homography(t_src).apply(source)
    dst = Homography(t_dst).apply(target)
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    _, sv, vt = np.linalg.svd(np.array(rows))
    if sv[-2] < 1e-10 * sv[0]:
        raise DegenerateConfigurationError("correspondences do not determine a unique homography")
    h = vt[-1].reshape(3, 3)
    return np.linalg.inv(t_dst) @ h @ t_src


def reprojection_rmse(h: Homography, c: CorrespondenceSet) -> float:
    residual = h.apply(c.source) - c.target
    return float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))


def estimate_homography(c: CorrespondenceSet) -> Homography:
    """Normalized DLT, refined by least squares on reprojection error from 5 pairs up."""
    m = _dlt(c.source, c.target)
    m = m / m[2, 2]
    h = Homography(m)
    rmse = reprojection_rmse(h, c)
    if len(c) >= 5 and rmse > 0:
        def residual(params: np.ndarray) -> np.ndarray:
            candidate = np.append(params, 1.0).reshape(3, 3)
            mapped = np.column_stack([c.source, np.ones(len(c))]) @ candidate.T
            return (mapped[:, :2] / mapped[:, 2:3] - c.target).ravel()

        result = least_squares(residual, m.ravel()[:8], method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12)
        refined = Homography(np.append(result.x, 1.0))
        refined_rmse = reprojection_rmse(refined, c)
        if refined_rmse <= rmse:
            h, rmse = refined, refined_rmse
    logger.info(f"Estimated homography from {len(c)} pairs, reprojection RMSE {rmse:.4f}px")
    return Homography(h.m, rmse=rmse)


def _warp_array(
    data: np.ndarray, h: Homography, out_width: int, out_height: int, fill: float, mode: str
) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:out_height, 0:out_width]
    dst = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    src = h.inverse().apply(dst)
    src_x = src[:, 0].reshape(out_height, out_width)
    src_y = src[:, 1].reshape(out_height, out_width)
    height, width = data.shape[:2]
    eps = 1e-9
    validity = (
        np.isfinite(src_x) & np.isfinite(src_y)
        & (src_x >= -eps) & (src_x <= width - 1 + eps)
        & (src_y >= -eps) & (src_y <= height - 1 + eps)
    )
    coords = np.stack([np.nan_to_num(src_y), np.nan_to_num(src_x)])
    planes = data[..., None] if data.ndim == 2 else data
    out = np.empty((out_height, out_width, planes.shape[2]), dtype=np.float64)
    for channel in range(planes.shape[2]):
        out[..., channel] = ndimage.map_coordinates(
            planes[..., channel].astype(np.float64), coords, order=1, mode="nearest"
        )
    if mode == "constant":
        out[~validity] = fill
    return (out[..., 0] if data.ndim == 2 else out), validity


def warp_image(
    image: AnyImage, h: Homography, out_width: int, out_height: int, mode: str = "constant"
) -> Tuple[AnyImage, np.ndarray]:
    """Inverse-map ``image`` through ``h`` with bilinear sampling.

    Returns the warped image and its validity mask. Invalid pixels hold 0,
    or ``calib_min`` for IR; ``mode="nearest"`` extends edge samples instead.
    """
    if isinstance(image, IrImage):
        data, validity = _warp_array(image.data, h, out_width, out_height, image.calib_min, mode)
        return IrImage(data, image.calib_min, image.calib_max), validity
    if isinstance(image, SdrImage):
        data, validity = _warp_array(image.data, h, out_width, out_height, 0.0, mode)
        codes = np.clip(np.rint(data), 0, 255).astype(np.uint8)
        return SdrImage(codes, image.exposure_time), validity
    if isinstance(image, RadianceImage):
        data, validity = _warp_array(image.data, h, out_width, out_height, 0.0, mode)
        return RadianceImage(np.maximum(data, 0.0)), validity
    data, validity = _warp_array(np.asarray(image), h, out_width, out_height, 0.0, mode)
    return data, validity


def largest_valid_rectangle(mask: np.ndarray) -> Tuple[int, int, int, int]:
    """Largest axis-aligned all-true rectangle as (top, left, height, width).

    Row-by-row histogram of consecutive true cells, with a monotone stack
    per row. Returns a zero-area rectangle for an all-false mask.
    """
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    heights = np.zeros(cols, dtype=np.int64)
    best_area, best = 0, (0, 0, 0, 0)
    for r in range(rows):
        heights = np.where(mask[r], heights + 1, 0)
        stack: List[int] = []
        for c in range(cols + 1):
            current = heights[c] if c < cols else 0
            while stack and heights[stack[-1]] >= current:
                top_height = int(heights[stack.pop()])
                left = stack[-1] + 1 if stack else 0
                area = top_height * (c - left)
                if area > best_area:
                    best_area = area
                    best = (r - top_height + 1, left, top_height, c - left)
            stack.append(c)
    return best


def overlap_crop(rgb: AnyImage, ir_warped: AnyImage, ir_validity: np.ndarray) -> Tuple[AnyImage, AnyImage]:
    if (rgb.height, rgb.width) != (ir_warped.height, ir_warped.width):
        raise ShapeMismatchError(
            f"RGB is {rgb.width}x{rgb.height} but warped IR is {ir_warped.width}x{ir_warped.height}"
        )
    if np.asarray(ir_validity).shape != (rgb.height, rgb.width):
        raise ShapeMismatchError("validity mask does not match the image size")
    top, left, height, width = largest_valid_rectangle(ir_validity)
    if height * width == 0:
        raise EmptyOverlapError("warped IR frame does not overlap the RGB frame")
    logger.debug(f"Overlap rectangle top={top} left={left} {width}x{height}")
    return crop_image(rgb, top, left, height, width), crop_image(ir_warped, top, left, height, width)


def register_pair(
    rgb: AnyImage, ir: IrImage, c: CorrespondenceSet
) -> Tuple[AnyImage, IrImage, Homography]:
    """Estimate, warp IR onto the RGB grid and crop both to the overlap."""
    h = estimate_homography(c)
    warped, validity = warp_image(ir, h, rgb.width, rgb.height)
    rgb_crop, ir_crop = overlap_crop(rgb, warped, validity)
    return rgb_crop, ir_crop, h


def load_correspondences(path: PathLike) -> CorrespondenceSet:
    document = CorrespondenceFile.model_validate(get_storage().read_json(path))
    return CorrespondenceSet(np.array(document.pairs, dtype=np.float64).reshape(-1, 4))


def save_correspondences(c: CorrespondenceSet, path: PathLike) -> Path:
    return get_storage().write_json(path, CorrespondenceFile(pairs=c.pairs.tolist()).model_dump())


def save_homography(h: Homography, path: PathLike) -> Path:
    return get_storage().write_json(path, h.to_list())


def load_homography(path: PathLike) -> Homography:
    values = get_storage().read_json(path)
    if len(values) != 9:
        raise DegenerateConfigurationError(f"homography file needs 9 numbers, got {len(values)}")
    return Homography(np.array(values, dtype=np.float64))
