import argparse
import logging
from pathlib import Path

from data import load_manifest, manifest_path
from errors import IncompatibleFormatError, MissingInputError, ShapeMismatchError
from hdrtnet import IrBranch, infer
from imgio import IrImage, SdrImage, image_kind, read_image, write_image
from models import AblationKind, TrainConfig
from register import load_correspondences, register_pair
from storage import get_storage
from training import (
    SceneDataset,
    load_model,
    run_ablation,
    run_sweep,
    save_model,
    train_hdr_branch,
    train_ir_branch,
    write_train_log,
)

logger = logging.getLogger(__name__)


def _add_training_flags(parser: argparse.ArgumentParser, loss_weights: bool = False):
    parser.add_argument("--data", required=True, help="dataset directory or manifest.json")
    parser.add_argument("--out", required=True, help="output path")
    parser.add_argument("--seed", type=int, required=True, help="training seed")
    parser.add_argument("--config", help="TrainConfig JSON file; flags override its values")
    parser.add_argument("--steps", type=int, help="optimizer steps per stage")
    parser.add_argument("--lr", type=float, help="initial learning rate")
    parser.add_argument("--batch-size", type=int, help="crops per step")
    parser.add_argument("--crop", type=int, help="crop size, a multiple of 16")
    if loss_weights:
        parser.add_argument("--alpha", type=float, help="perceptual loss weight")
        parser.add_argument("--beta", type=float, help="adversarial loss weight")


def register(subparsers):
    ir = subparsers.add_parser("train-ir", help="stage one: train the IR-to-RGB branch")
    _add_training_flags(ir, loss_weights=True)
    ir.set_defaults(handler=train_ir)

    hdr = subparsers.add_parser("train-hdr", help="stage two: train the HDR branch on a frozen IR prefix")
    _add_training_flags(hdr, loss_weights=True)
    hdr.add_argument("--ir-checkpoint", required=True, help="checkpoint written by train-ir")
    hdr.set_defaults(handler=train_hdr)

    inf = subparsers.add_parser("infer", help="reconstruct radiance from an SDR frame and an IR frame")
    inf.add_argument("--model", required=True, help="checkpoint written by train-hdr")
    inf.add_argument("--sdr", required=True, help="SDR input (.png or .ppm)")
    inf.add_argument("--ir", help="IR input (.pgm); required unless the model is the rgb variant")
    inf.add_argument("--correspondences", help="register the IR frame with this correspondence JSON first")
    inf.add_argument("--out", required=True, help="output radiance file (.hdr or .pfm)")
    inf.set_defaults(handler=infer_image)

    ab = subparsers.add_parser("ablate", help="train and score the rgb, pixel, combined and full variants")
    _add_training_flags(ab, loss_weights=True)
    ab.set_defaults(handler=ablate)

    sw = subparsers.add_parser("sweep", help="grid over perceptual and adversarial loss weights")
    _add_training_flags(sw)
    sw.set_defaults(handler=sweep)


def train_config(args: argparse.Namespace) -> TrainConfig:
    """Settings defaults, then the JSON config file, then flags"""
    values = TrainConfig().model_dump()
    if args.config:
        values = TrainConfig.model_validate(get_storage().read_json(args.config)).model_dump()
    flags = {
        "seed": args.seed,
        "steps": args.steps,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "crop_size": args.crop,
    }
    values.update({key: value for key, value in flags.items() if value is not None})
    for weight in ("alpha", "beta"):
        if getattr(args, weight, None) is not None:
            values["loss"][weight] = getattr(args, weight)
    return TrainConfig.model_validate(values)


def _dataset(args: argparse.Namespace, split: str = "train"):
    manifest = load_manifest(args.data)
    root = manifest_path(args.data).parent
    return root, manifest, SceneDataset(root, manifest, split)


def _log_path(out: str) -> Path:
    return Path(f"{out}.log.csv")


def train_ir(args: argparse.Namespace):
    """Train the IR branch and save its checkpoint"""
    config = train_config(args)
    _, _, dataset = _dataset(args)
    model, log = train_ir_branch(dataset, config)
    save_model(model, args.out, "ir", config)
    write_train_log(log, _log_path(args.out))


def train_hdr(args: argparse.Namespace):
    """Freeze a trained IR prefix and train the HDR branch"""
    ir_branch, _ = load_model(args.ir_checkpoint)
    if not isinstance(ir_branch, IrBranch):
        raise IncompatibleFormatError(f"{args.ir_checkpoint} is not an IR branch checkpoint")
    config = train_config(args)
    # The HDR branch fuses at the IR branch's widths
    config = TrainConfig.model_validate({**config.model_dump(), "widths": ir_branch.unet.spec.widths})
    _, _, dataset = _dataset(args)
    codec = dataset.codec()
    model, _, log = train_hdr_branch(dataset, ir_branch, config, codec)
    save_model(model, args.out, AblationKind.FULL.value, config, codec)
    write_train_log(log, _log_path(args.out))


def infer_image(args: argparse.Namespace):
    """Run a trained model on one SDR / IR pair"""
    model, codec = load_model(args.model)
    if codec is None:
        raise IncompatibleFormatError(f"{args.model} stores no radiance scale; was it written by train-hdr?")
    sdr = read_image(args.sdr)
    if not isinstance(sdr, SdrImage):
        raise IncompatibleFormatError(f"{args.sdr} holds a {image_kind(sdr)} image, expected SDR")
    ir = None
    if getattr(model, "uses_ir", False):
        if not args.ir:
            raise MissingInputError("this model needs an IR frame; pass --ir")
        ir = read_image(args.ir)
        if not isinstance(ir, IrImage):
            raise IncompatibleFormatError(f"{args.ir} holds a {image_kind(ir)} image, expected IR")
        if args.correspondences:
            sdr, ir, _ = register_pair(sdr, ir, load_correspondences(args.correspondences))
        elif (ir.width, ir.height) != (sdr.width, sdr.height):
            raise ShapeMismatchError("IR and SDR sizes differ; pass --correspondences to register them")
    write_image(infer(model, sdr, ir, codec), args.out)


def ablate(args: argparse.Namespace):
    """Ablation table over the four network variants"""
    config = train_config(args)
    manifest = load_manifest(args.data)
    run_ablation(manifest_path(args.data).parent, manifest, config, args.out)


def sweep(args: argparse.Namespace):
    """Loss-weight grid for the full model"""
    config = train_config(args)
    manifest = load_manifest(args.data)
    run_sweep(manifest_path(args.data).parent, manifest, config, args.out)
