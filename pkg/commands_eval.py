import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from config import settings
from errors import IncompatibleFormatError
from imgio import RadianceImage, image_kind, read_image, write_image
from metrics import evaluate, metric_rows_to_csv, read_metric_rows, summarize_rows, write_metric_rows
from models import ExposureClass, MetricRow
from storage import get_storage
from tonemap import durand_tonemap

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["group", "count", "pu_psnr", "pu_ssim", "pu_vsi"]


def register(subparsers):
    tm = subparsers.add_parser("tonemap", help="tone map a radiance map to an 8-bit PNG")
    tm.add_argument("--input", required=True, help="radiance file (.hdr or .pfm)")
    tm.add_argument("--out", required=True, help="output PNG")
    tm.add_argument("--contrast", type=float, default=settings.TONEMAP_CONTRAST, help="target base-layer contrast in log10 units")
    tm.add_argument("--saturation", type=float, default=settings.TONEMAP_SATURATION, help="colour saturation exponent")
    tm.add_argument("--sigma-s", type=float, help="spatial sigma in pixels (default: 2%% of the image diagonal)")
    tm.add_argument("--sigma-r", type=float, default=settings.TONEMAP_SIGMA_R, help="range sigma in log10 luminance")
    tm.set_defaults(handler=tonemap_image)

    mt = subparsers.add_parser("metrics", help="score a radiance map against a reference")
    mt.add_argument("--test", required=True, help="reconstructed radiance file")
    mt.add_argument("--ref", required=True, help="reference radiance file")
    mt.add_argument("--peak", type=float, default=settings.PEAK_LUMINANCE, help="display peak luminance in cd/m2")
    mt.add_argument("--scene-id", help="scene id for the CSV row (default: test file stem)")
    mt.add_argument(
        "--exposure-class",
        choices=[c.value for c in ExposureClass],
        default=ExposureClass.WELL.value,
        help="exposure class recorded in the CSV row",
    )
    mt.add_argument("--out", help="CSV output (default: stdout)")
    mt.set_defaults(handler=score_images)

    rp = subparsers.add_parser("report", help="aggregate metric CSVs into over / under / all means")
    rp.add_argument("--inputs", nargs="+", required=True, help="metric CSV files")
    rp.add_argument("--out", required=True, help="summary CSV output")
    rp.set_defaults(handler=report)


def _read_radiance(path: str) -> RadianceImage:
    image = read_image(path)
    if not isinstance(image, RadianceImage):
        raise IncompatibleFormatError(f"{path} holds a {image_kind(image)} image, expected radiance")
    return image


def tonemap_image(args: argparse.Namespace):
    """Durand tone mapping of one radiance map"""
    scene = _read_radiance(args.input)
    sdr = durand_tonemap(
        scene,
        target_contrast=args.contrast,
        saturation=args.saturation,
        sigma_s=args.sigma_s,
        sigma_r=args.sigma_r,
    )
    write_image(sdr, args.out)


def score_images(args: argparse.Namespace):
    """PU21 metrics of a test radiance map against its reference"""
    test = _read_radiance(args.test)
    ref = _read_radiance(args.ref)
    report = evaluate(test, ref, args.peak)
    row = MetricRow(
        scene_id=args.scene_id or Path(args.test).stem,
        exposure_class=ExposureClass(args.exposure_class),
        pu_psnr=report.pu_psnr,
        pu_ssim=report.pu_ssim,
        pu_vsi=report.pu_vsi,
    )
    if args.out:
        write_metric_rows([row], args.out)
    else:
        sys.stdout.write(metric_rows_to_csv([row]))


def report(args: argparse.Namespace):
    """Per-class means over every row of the input CSVs"""
    rows = []
    for path in args.inputs:
        rows.extend(read_metric_rows(path))
    summary = summarize_rows(rows)

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for group, values in summary.items():
        writer.writerow([
            group,
            int(values["count"]),
            f"{values['pu_psnr']:.4f}",
            f"{values['pu_ssim']:.6f}",
            f"{values['pu_vsi']:.6f}",
        ])
    get_storage().write_text(args.out, buffer.getvalue())
    logger.info(f"Summarized {len(rows)} rows from {len(args.inputs)} files into {args.out}")
