import argparse
import logging

import numpy as np

from data import build_dataset
from errors import BracketError, IncompatibleFormatError
from hdr import Bracket, load_crf, merge_brackets, recover_crf, saturation_mask, save_crf
from imgio import IrImage, SdrImage, image_kind, read_image, write_image
from models import GeneratorConfig
from register import load_correspondences, register_pair, save_homography
from config import settings
from storage import get_storage

logger = logging.getLogger(__name__)


def register(subparsers):
    gen = subparsers.add_parser("gen-data", help="generate a synthetic RGB-IR-HDR dataset")
    gen.add_argument("--n", type=int, required=True, help="number of scenes")
    gen.add_argument("--seed", type=int, required=True, help="dataset seed")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--size", type=int, help=f"scene width and height in pixels (default {settings.SCENE_SIZE})")
    gen.add_argument("--workers", type=int, default=settings.DATA_WORKERS, help="scenes generated concurrently")
    gen.add_argument("--config", help="GeneratorConfig JSON file; --size overrides its size")
    gen.set_defaults(handler=gen_data)

    merge = subparsers.add_parser("merge", help="merge an exposure bracket into a radiance map")
    merge.add_argument("--frames", nargs="+", required=True, help="SDR frames in increasing exposure order")
    merge.add_argument("--exposures", nargs="+", type=float, help="exposure times in seconds (default: sidecars)")
    merge.add_argument("--out", required=True, help="output radiance file (.hdr or .pfm)")
    merge.add_argument("--crf", help="response curve JSON to use instead of recovering one")
    merge.add_argument("--crf-out", help="write the recovered response curves here")
    merge.add_argument("--lambda", dest="smoothness", type=float, default=settings.CRF_LAMBDA, help="response smoothness weight")
    merge.add_argument("--samples", type=int, default=settings.CRF_SAMPLES, help="pixels sampled for response recovery")
    merge.add_argument("--mask-out", help="write the saturation mask as a PNG")
    merge.set_defaults(handler=merge_frames)

    reg = subparsers.add_parser("register", help="warp an IR frame onto an RGB frame and crop the overlap")
    reg.add_argument("--rgb", required=True, help="RGB image (SDR or radiance)")
    reg.add_argument("--ir", required=True, help="IR image (.pgm)")
    reg.add_argument("--correspondences", required=True, help="correspondence JSON, rows of [x_ir, y_ir, x_rgb, y_rgb]")
    reg.add_argument("--out-rgb", required=True, help="cropped RGB output")
    reg.add_argument("--out-ir", required=True, help="registered and cropped IR output (.pgm)")
    reg.add_argument("--homography-out", help="write the estimated homography JSON here")
    reg.set_defaults(handler=register_images)


def gen_data(args: argparse.Namespace):
    """Generate scenes and write the dataset manifest"""
    config = GeneratorConfig()
    if args.config:
        config = GeneratorConfig.model_validate(get_storage().read_json(args.config))
    if args.size is not None:
        config = GeneratorConfig.model_validate({**config.model_dump(), "size": args.size})
    manifest = build_dataset(args.n, args.out, config, seed=args.seed, workers=args.workers)
    logger.info(f"Dataset ready: {len(manifest.scenes)} scenes in {args.out}")


def merge_frames(args: argparse.Namespace):
    """Recover or load a response curve and merge the bracket"""
    frames = []
    for path in args.frames:
        frame = read_image(path)
        if not isinstance(frame, SdrImage):
            raise IncompatibleFormatError(f"{path} holds a {image_kind(frame)} image, expected SDR")
        frames.append(frame)
    if args.exposures:
        if len(args.exposures) != len(frames):
            raise BracketError(f"{len(frames)} frames but {len(args.exposures)} exposure times")
        frames = [SdrImage(f.data, t) for f, t in zip(frames, args.exposures)]
    bracket = Bracket(tuple(frames))

    if args.crf:
        crf = load_crf(args.crf)
    else:
        crf = recover_crf(bracket, smoothness=args.smoothness, n_samples=args.samples)
        if args.crf_out:
            save_crf(crf, args.crf_out)
    write_image(merge_brackets(bracket, crf), args.out)

    if args.mask_out:
        mask = saturation_mask(bracket)
        codes = np.repeat((mask * 255).astype(np.uint8)[..., None], 3, axis=2)
        write_image(SdrImage(codes, 1.0), args.mask_out)
        logger.info(f"{int(mask.sum())} saturated pixels written to {args.mask_out}")


def register_images(args: argparse.Namespace):
    """Register the IR frame to the RGB frame"""
    rgb = read_image(args.rgb)
    ir = read_image(args.ir)
    if not isinstance(ir, IrImage):
        raise IncompatibleFormatError(f"{args.ir} holds a {image_kind(ir)} image, expected IR")
    rgb_crop, ir_crop, h = register_pair(rgb, ir, load_correspondences(args.correspondences))
    logger.info(f"Homography reprojection RMSE {h.rmse:.4f}px; overlap {rgb_crop.width}x{rgb_crop.height}")
    write_image(rgb_crop, args.out_rgb)
    write_image(ir_crop, args.out_ir)
    if args.homography_out:
        save_homography(h, args.homography_out)
