"""Typed image containers and bit-exact codecs for HDR, SDR and IR frames.

RadianceImage travels through RGBE (.hdr) or PFM, SdrImage through PNG or
PPM, IrImage through 16-bit PGM. SDR and IR files carry a JSON sidecar
(``<file>.json``) holding exposure time or calibration range.
"""
import io
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from config import settings
from errors import FormatError, IncompatibleFormatError, InvalidImageError
from models import ImageFormat, SidecarMetadata
from storage import get_storage

logger = logging.getLogger(__name__)

# Rec. 709 luminance weights
REC709 = np.array([0.2126, 0.7152, 0.0722])

# Largest accepted pixel count per file
MAX_PIXELS = 1 << 28

PathLike = Union[str, Path]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True, order="C")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class RadianceImage:
    """Linear relative radiance, shape (height, width, 3), float32."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidImageError(f"radiance data must be (H, W, 3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidImageError("radiance samples must be finite")
        if np.any(data < 0):
            raise InvalidImageError("radiance samples must be non-negative")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def scaled(self, factor: float) -> "RadianceImage":
        return RadianceImage(self.data * np.float32(factor))

    def __eq__(self, other) -> bool:
        return isinstance(other, RadianceImage) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SdrImage:
    """8-bit RGB codes, shape (height, width, 3), tagged with its exposure time in seconds."""

    data: np.ndarray
    exposure_time: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidImageError(f"SDR data must be (H, W, 3), got {data.shape}")
        if data.dtype != np.uint8:
            if np.any(data < 0) or np.any(data > 255) or np.any(data != np.round(data)):
                raise InvalidImageError("SDR codes must be integers in [0, 255]")
            data = data.astype(np.uint8)
        if not self.exposure_time > 0:
            raise InvalidImageError(f"exposure time must be positive, got {self.exposure_time}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "exposure_time", float(self.exposure_time))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SdrImage)
            and self.exposure_time == other.exposure_time
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class IrImage:
    """Single-channel temperature map in degrees Celsius, shape (height, width)."""

    data: np.ndarray
    calib_min: float = settings.IR_CALIB_MIN
    calib_max: float = settings.IR_CALIB_MAX

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise InvalidImageError(f"IR data must be (H, W), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidImageError("IR samples must be finite")
        if not self.calib_min < self.calib_max:
            raise InvalidImageError(f"calibration range [{self.calib_min}, {self.calib_max}] is empty")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "calib_min", float(self.calib_min))
        object.__setattr__(self, "calib_max", float(self.calib_max))

    @classmethod
    def from_codes(cls, codes: np.ndarray, calib_min: float, calib_max: float, max_code: int = 65535) -> "IrImage":
        temps = calib_min + np.asarray(codes, dtype=np.float64) / max_code * (calib_max - calib_min)
        return cls(temps, calib_min, calib_max)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, IrImage)
            and (self.calib_min, self.calib_max) == (other.calib_min, other.calib_max)
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


AnyImage = Union[RadianceImage, SdrImage, IrImage]

_EXTENSIONS = {
    ".hdr": ImageFormat.RGBE,
    ".pic": ImageFormat.RGBE,
    ".rgbe": ImageFormat.RGBE,
    ".pfm": ImageFormat.PFM,
    ".png": ImageFormat.PNG,
    ".ppm": ImageFormat.PPM,
    ".pgm": ImageFormat.PGM16,
}

_KIND_FORMATS = {
    RadianceImage: (ImageFormat.RGBE, ImageFormat.PFM),
    SdrImage: (ImageFormat.PNG, ImageFormat.PPM),
    IrImage: (ImageFormat.PGM16,),
}


def format_from_path(path: PathLike) -> ImageFormat:
    suffix = Path(path).suffix.lower()
    if suffix not in _EXTENSIONS:
        raise IncompatibleFormatError(f"cannot infer an image format from '{suffix}'")
    return _EXTENSIONS[suffix]


def sidecar_path(path: PathLike) -> Path:
    return Path(f"{path}.json")


class _HeaderReader:
    """Cursor over a file's bytes that remembers its offset for error reporting."""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def line(self) -> str:
        end = self.payload.find(b"\n", self.pos)
        if end < 0:
            raise FormatError("unterminated header line", self.pos)
        text = self.payload[self.pos:end].decode("ascii", errors="replace")
        self.pos = end + 1
        return text

    def token(self) -> str:
        payload = self.payload
        while self.pos < len(payload):
            char = payload[self.pos:self.pos + 1]
            if char == b"#":
                end = payload.find(b"\n", self.pos)
                self.pos = len(payload) if end < 0 else end + 1
            elif char.isspace():
                self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < len(payload) and not payload[self.pos:self.pos + 1].isspace():
            self.pos += 1
        if start == self.pos:
            raise FormatError("unexpected end of header", start)
        return payload[start:self.pos].decode("ascii", errors="replace")

    def integer(self, what: str) -> int:
        start = self.pos
        text = self.token()
        try:
            return int(text)
        except ValueError:
            raise FormatError(f"malformed {what} '{text}'", start)

    def number(self, what: str) -> float:
        start = self.pos
        text = self.token()
        try:
            return float(text)
        except ValueError:
            raise FormatError(f"malformed {what} '{text}'", start)

    def single_whitespace(self):
        if self.pos >= len(self.payload) or not self.payload[self.pos:self.pos + 1].isspace():
            raise FormatError("expected whitespace before payload", self.pos)
        self.pos += 1

    def require(self, nbytes: int):
        if len(self.payload) - self.pos < nbytes:
            raise FormatError(
                f"truncated payload: need {nbytes} bytes, {len(self.payload) - self.pos} available", self.pos
            )


def _check_dimensions(width: int, height: int, offset: int):
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid dimensions {width}x{height}", offset)
    if width * height > MAX_PIXELS:
        raise FormatError(f"dimension overflow {width}x{height}", offset)


def _rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    # value = (mantissa + 0.5) / 256 * 2^(exponent - 128); exponent 0 encodes black
    exponent = rgbe[..., 3].astype(np.int32)
    scale = np.where(exponent > 0, np.ldexp(1.0, exponent - 136), 0.0)
    return (rgbe[..., :3].astype(np.float64) + 0.5) * scale[..., None]


def _float_to_rgbe(data: np.ndarray) -> np.ndarray:
    data = data.astype(np.float64)
    peak = data.max(axis=2)
    _, exponent = np.frexp(peak)
    exponent = np.clip(exponent, -127, 127)
    mantissa = np.floor(data * np.ldexp(1.0, 8 - exponent)[..., None])
    rgbe = np.zeros(data.shape[:2] + (4,), dtype=np.uint8)
    visible = peak >= 1e-32
    rgbe[..., :3] = np.where(visible[..., None], np.clip(mantissa, 0, 255), 0).astype(np.uint8)
    rgbe[..., 3] = np.where(visible, exponent + 128, 0).astype(np.uint8)
    return rgbe


def _decode_rgbe_scanlines(payload: bytes, pos: int, width: int, height: int) -> np.ndarray:
    out = np.empty((height, width, 4), dtype=np.uint8)
    size = len(payload)
    for y in range(height):
        rle = (
            8 <= width <= 0x7FFF
            and pos + 4 <= size
            and payload[pos] == 2
            and payload[pos + 1] == 2
            and not payload[pos + 2] & 0x80
        )
        if not rle:
            need = width * 4
            if pos + need > size:
                raise FormatError(f"truncated payload in scanline {y}", pos)
            out[y] = np.frombuffer(payload, np.uint8, need, pos).reshape(width, 4)
            pos += need
            continue
        if (payload[pos + 2] << 8 | payload[pos + 3]) != width:
            raise FormatError(f"scanline {y} width does not match header", pos)
        pos += 4
        for channel in range(4):
            x = 0
            while x < width:
                if pos >= size:
                    raise FormatError(f"truncated payload in scanline {y}", pos)
                count = payload[pos]
                pos += 1
                if count > 128:
                    count -= 128
                    if x + count > width or pos >= size:
                        raise FormatError("run overruns scanline", pos - 1)
                    out[y, x:x + count, channel] = payload[pos]
                    pos += 1
                else:
                    if count == 0 or x + count > width or pos + count > size:
                        raise FormatError("literal run overruns scanline", pos - 1)
                    out[y, x:x + count, channel] = np.frombuffer(payload, np.uint8, count, pos)
                    pos += count
                x += count
    return out


class ImageCodec:

    @staticmethod
    def read_pfm(payload: bytes) -> RadianceImage:
        reader = _HeaderReader(payload)
        magic = reader.token()
        if magic == "PF":
            channels = 3
        elif magic == "Pf":
            channels = 1
        else:
            raise FormatError(f"not a PFM file (magic '{magic}')", 0)
        dims_at = reader.pos
        width = reader.integer("width")
        height = reader.integer("height")
        _check_dimensions(width, height, dims_at)
        scale = reader.number("scale")
        if scale == 0:
            raise FormatError("PFM scale must be non-zero", reader.pos)
        reader.single_whitespace()
        count = width * height * channels
        reader.require(count * 4)
        # Negative scale means little-endian; the magnitude is ignored
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(payload, dtype, count, reader.pos).reshape(height, width, channels)[::-1]
        if channels == 1:
            data = np.repeat(data, 3, axis=2)
        return RadianceImage(data.astype(np.float32))

    @staticmethod
    def write_pfm(image: RadianceImage) -> bytes:
        header = f"PF\n{image.width} {image.height}\n-1.0\n".encode("ascii")
        return header + np.ascontiguousarray(image.data[::-1]).astype("<f4").tobytes()

    @staticmethod
    def read_rgbe(payload: bytes) -> RadianceImage:
        reader = _HeaderReader(payload)
        if not reader.line().startswith("#?"):
            raise FormatError("missing '#?' Radiance magic", 0)
        exposure = 1.0
        while True:
            start = reader.pos
            line = reader.line().strip()
            if not line:
                break
            if line.startswith("FORMAT=") and line != "FORMAT=32-bit_rle_rgbe":
                raise FormatError(f"unsupported pixel format '{line}'", start)
            if line.startswith("EXPOSURE="):
                try:
                    exposure *= float(line.split("=", 1)[1])
                except ValueError:
                    raise FormatError(f"malformed '{line}'", start)
        resolution_at = reader.pos
        match = re.fullmatch(r"-Y\s+(\d+)\s+\+X\s+(\d+)", reader.line().strip())
        if not match:
            raise FormatError("unsupported resolution line (expected '-Y H +X W')", resolution_at)
        height, width = int(match.group(1)), int(match.group(2))
        _check_dimensions(width, height, resolution_at)
        rgbe = _decode_rgbe_scanlines(payload, reader.pos, width, height)
        data = _rgbe_to_float(rgbe)
        if exposure > 0 and exposure != 1.0:
            data = data / exposure
        return RadianceImage(data.astype(np.float32))

    @staticmethod
    def write_rgbe(image: RadianceImage) -> bytes:
        header = (
            "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n"
            f"-Y {image.height} +X {image.width}\n"
        ).encode("ascii")
        return header + _float_to_rgbe(image.data).tobytes()

    @staticmethod
    def read_png(payload: bytes) -> np.ndarray:
        try:
            with Image.open(io.BytesIO(payload)) as picture:
                if picture.format != "PNG":
                    raise FormatError(f"not a PNG file ({picture.format})", 0)
                return np.asarray(picture.convert("RGB"), dtype=np.uint8)
        except (UnidentifiedImageError, OSError) as e:
            raise FormatError(f"unreadable PNG: {e}", 0)

    @staticmethod
    def write_png(image: SdrImage) -> bytes:
        buffer = io.BytesIO()
        Image.fromarray(np.asarray(image.data)).save(buffer, format="PNG")
        return buffer.getvalue()

    @staticmethod
    def read_ppm(payload: bytes) -> np.ndarray:
        reader = _HeaderReader(payload)
        if reader.token() != "P6":
            raise FormatError("not a binary PPM (P6) file", 0)
        dims_at = reader.pos
        width = reader.integer("width")
        height = reader.integer("height")
        _check_dimensions(width, height, dims_at)
        maxval_at = reader.pos
        if reader.integer("maxval") != 255:
            raise FormatError("only 8-bit PPM (maxval 255) is supported", maxval_at)
        reader.single_whitespace()
        reader.require(width * height * 3)
        return np.frombuffer(payload, np.uint8, width * height * 3, reader.pos).reshape(height, width, 3)

    @staticmethod
    def write_ppm(image: SdrImage) -> bytes:
        header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
        return header + np.ascontiguousarray(image.data).tobytes()

    @staticmethod
    def read_pgm(payload: bytes) -> Tuple[np.ndarray, int]:
        reader = _HeaderReader(payload)
        if reader.token() != "P5":
            raise FormatError("not a binary PGM (P5) file", 0)
        dims_at = reader.pos
        width = reader.integer("width")
        height = reader.integer("height")
        _check_dimensions(width, height, dims_at)
        maxval_at = reader.pos
        maxval = reader.integer("maxval")
        if not 0 < maxval <= 65535:
            raise FormatError(f"maxval {maxval} out of range", maxval_at)
        reader.single_whitespace()
        # Netpbm stores 16-bit samples most significant byte first
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        reader.require(width * height * dtype.itemsize)
        codes = np.frombuffer(payload, dtype, width * height, reader.pos).reshape(height, width)
        return codes.astype(np.int64), maxval

    @staticmethod
    def write_pgm(image: IrImage) -> bytes:
        span = image.calib_max - image.calib_min
        unit = (image.data.astype(np.float64) - image.calib_min) / span
        if np.any(unit < 0) or np.any(unit > 1):
            logger.warning(
                f"IR temperatures outside [{image.calib_min}, {image.calib_max}] clipped when encoding"
            )
        codes = np.rint(np.clip(unit, 0.0, 1.0) * 65535).astype(">u2")
        header = f"P5\n{image.width} {image.height}\n65535\n".encode("ascii")
        return header + codes.tobytes()

    def decode(self, payload: bytes, fmt: ImageFormat, sidecar: SidecarMetadata) -> AnyImage:
        if fmt == ImageFormat.PFM:
            return self.read_pfm(payload)
        elif fmt == ImageFormat.RGBE:
            return self.read_rgbe(payload)
        elif fmt in (ImageFormat.PNG, ImageFormat.PPM):
            codes = self.read_png(payload) if fmt == ImageFormat.PNG else self.read_ppm(payload)
            return SdrImage(codes, sidecar.exposure_time or 1.0)
        elif fmt == ImageFormat.PGM16:
            codes, maxval = self.read_pgm(payload)
            calib_min = settings.IR_CALIB_MIN if sidecar.calib_min is None else sidecar.calib_min
            calib_max = settings.IR_CALIB_MAX if sidecar.calib_max is None else sidecar.calib_max
            return IrImage.from_codes(codes, calib_min, calib_max, max_code=maxval)
        raise IncompatibleFormatError(f"unsupported format {fmt}")

    def encode(self, image: AnyImage, fmt: ImageFormat) -> Tuple[bytes, Optional[SidecarMetadata]]:
        allowed = _KIND_FORMATS.get(type(image), ())
        if fmt not in allowed:
            raise IncompatibleFormatError(f"{type(image).__name__} cannot be stored as {fmt.value}")
        if fmt == ImageFormat.PFM:
            return self.write_pfm(image), None
        elif fmt == ImageFormat.RGBE:
            return self.write_rgbe(image), None
        elif fmt == ImageFormat.PNG:
            return self.write_png(image), SidecarMetadata(exposure_time=image.exposure_time)
        elif fmt == ImageFormat.PPM:
            return self.write_ppm(image), SidecarMetadata(exposure_time=image.exposure_time)
        return self.write_pgm(image), SidecarMetadata(calib_min=image.calib_min, calib_max=image.calib_max)

# Singleton instance
image_codec = ImageCodec()

def get_image_codec() -> ImageCodec:
    return image_codec


def read_image(path: PathLike, fmt: Optional[ImageFormat] = None) -> AnyImage:
    """Read an image file; RGBE/PFM give RadianceImage, PNG/PPM SdrImage, PGM16 IrImage."""
    storage = get_storage()
    fmt = ImageFormat(fmt) if fmt is not None else format_from_path(path)
    payload = storage.read_bytes(path)
    sidecar = SidecarMetadata()
    if storage.exists(sidecar_path(path)):
        sidecar = SidecarMetadata.model_validate(storage.read_json(sidecar_path(path)))
    image = get_image_codec().decode(payload, fmt, sidecar)
    logger.debug(f"Read {type(image).__name__} {image.width}x{image.height} from {path}")
    return image


def write_image(image: AnyImage, path: PathLike, fmt: Optional[ImageFormat] = None) -> Path:
    storage = get_storage()
    fmt = ImageFormat(fmt) if fmt is not None else format_from_path(path)
    payload, sidecar = get_image_codec().encode(image, fmt)
    target = storage.write_bytes(path, payload)
    if sidecar is not None:
        storage.write_json(sidecar_path(path), sidecar.model_dump(exclude_none=True))
    logger.info(f"Wrote {type(image).__name__} {image.width}x{image.height} to {target}")
    return target


def luminance(image: Union[RadianceImage, np.ndarray]) -> np.ndarray:
    """Per-pixel Rec. 709 luminance of a linear RGB image."""
    data = image.data if isinstance(image, RadianceImage) else np.asarray(image)
    return data.astype(np.float64) @ REC709


def sdr_to_unit(image: SdrImage) -> np.ndarray:
    """Gamma-encoded codes as floats in [0, 1], shape (H, W, 3)."""
    return image.data.astype(np.float32) / 255.0


def ir_to_unit(image: IrImage) -> np.ndarray:
    """Temperatures normalized by the calibration range, (T - min) / (max - min)."""
    return ((image.data - image.calib_min) / (image.calib_max - image.calib_min)).astype(np.float32)


def crop_image(image: AnyImage, top: int, left: int, height: int, width: int) -> AnyImage:
    window = (slice(top, top + height), slice(left, left + width))
    if isinstance(image, RadianceImage):
        return RadianceImage(image.data[window])
    if isinstance(image, SdrImage):
        return SdrImage(image.data[window], image.exposure_time)
    return IrImage(image.data[window], image.calib_min, image.calib_max)


def image_kind(image: AnyImage) -> str:
    """'radiance', 'sdr' or 'ir'."""
    for kind, cls in (("radiance", RadianceImage), ("sdr", SdrImage), ("ir", IrImage)):
        if isinstance(image, cls):
            return kind
    raise InvalidImageError(f"not an image container: {type(image).__name__}")
