"""Two-branch HDR reconstruction network, its losses and ablation variants.

The IR branch is a U-Net trained to translate thermal frames into RGB.
Its input layer and first three downsampling modules are then frozen and
their features are concatenated into the encoder of the HDR branch,
which predicts log-encoded radiance from a single SDR frame.
"""
import logging
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from config import settings
from errors import ShapeMismatchError
from imgio import IrImage, RadianceImage, SdrImage, ir_to_unit, sdr_to_unit
from models import AblationKind, LossWeights, TrainConfig, UNetSpec
from nncore import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Module,
    Parameter,
    Tensor,
    bce,
    concat_channels,
    cosine_sim,
    l1_mean,
    leaky_relu,
    maxpool2x2,
    no_grad,
    relu,
    sigmoid,
)

logger = logging.getLogger(__name__)

PIXEL_L1_WEIGHT = 0.99
PIXEL_COS_WEIGHT = 0.01


class DoubleConv(Module):
    """(conv3x3 => BN => ReLU) * 2"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng=rng)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng=rng)
        self.bn2 = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.bn1(self.conv1(x)))
        return relu(self.bn2(self.conv2(x)))


class Down(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = DoubleConv(in_channels, out_channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(maxpool2x2(x))


class Up(Module):
    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.up = ConvTranspose2d(in_channels, in_channels // 2, rng=rng)
        self.conv = DoubleConv(in_channels // 2 + skip_channels, out_channels, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        return self.conv(concat_channels([skip, self.up(x)]))


class UNet(Module):
    """Four down and four up modules with encoder skips.

    At each fusion point k the input of the (k+1)-th downsampling module
    is the HDR feature k concatenated with the matching IR feature;
    skips into the decoder carry the network's own features only.
    """

    def __init__(self, spec: UNetSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        w = spec.widths
        ir = spec.ir_widths or [0, 0, 0, 0]

        def fused(k: int) -> int:
            return w[k] + (ir[k] if k in spec.fusion_points else 0)

        self.inc = DoubleConv(spec.in_channels, w[0], rng)
        self.down1 = Down(fused(0), w[1], rng)
        self.down2 = Down(fused(1), w[2], rng)
        self.down3 = Down(fused(2), w[3], rng)
        self.down4 = Down(fused(3), 2 * w[3], rng)
        self.up1 = Up(2 * w[3], w[3], w[3], rng)
        self.up2 = Up(w[3], w[2], w[2], rng)
        self.up3 = Up(w[2], w[1], w[1], rng)
        self.up4 = Up(w[1], w[0], w[0], rng)
        self.outc = Conv2d(w[0], spec.out_channels, 1, rng=rng)

    def prefix_modules(self) -> List[Module]:
        return [self.inc, self.down1, self.down2, self.down3]

    def prefix_features(self, x: Tensor) -> List[Tensor]:
        features = [self.inc(x)]
        for down in (self.down1, self.down2, self.down3):
            features.append(down(features[-1]))
        return features

    def forward(self, x: Tensor, ir_features: Optional[Sequence[Tensor]] = None) -> Tensor:
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeMismatchError(f"U-Net input must be a multiple of 16 in height and width, got {x.shape[2:]}")
        if self.spec.fusion_points and ir_features is None:
            raise ShapeMismatchError("this U-Net fuses IR features but none were given")
        downs = (self.down1, self.down2, self.down3, self.down4)
        features = [self.inc(x)]
        for k, down in enumerate(downs):
            stage_input = features[-1]
            if k in self.spec.fusion_points:
                stage_input = concat_channels([stage_input, ir_features[k]])
            features.append(down(stage_input))
        x0, x1, x2, x3, x4 = features
        y = self.up1(x4, x3)
        y = self.up2(y, x2)
        y = self.up3(y, x1)
        y = self.up4(y, x0)
        return self.outc(y)


class IrBranch(Module):
    """U-Net translating a normalized thermal frame into RGB."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        super().__init__()
        self.unet = UNet(UNetSpec(in_channels=1, out_channels=3, widths=list(widths)), rng)
        self.prefix_frozen = False

    def forward(self, ir: Tensor) -> Tensor:
        return self.unet(ir)

    def prefix_parameters(self) -> List[Parameter]:
        return [p for module in self.unet.prefix_modules() for p in module.parameters()]

    def features(self, ir: Tensor) -> List[Tensor]:
        return self.unet.prefix_features(ir)

    def freeze_prefix(self) -> "IrBranch":
        for module in self.unet.prefix_modules():
            module.freeze()
            module.eval()
        self.prefix_frozen = True
        logger.info(f"Froze IR prefix ({len(self.prefix_parameters())} parameter tensors)")
        return self

    def train(self, mode: bool = True) -> "IrBranch":
        super().train(mode)
        if self.prefix_frozen:
            for module in self.unet.prefix_modules():
                module.eval()
        return self


class HdrBranch(Module):
    def __init__(self, spec: UNetSpec, rng: np.random.Generator):
        super().__init__()
        self.unet = UNet(spec, rng)

    def forward(self, sdr: Tensor, ir_features: Sequence[Tensor]) -> Tensor:
        return self.unet(sdr, ir_features)


class HdrtNet(Module):
    """SDR + IR to log radiance. ``joint`` trains both branches end to end without freezing."""

    uses_ir = True

    def __init__(self, widths: Sequence[int], fusion_points: Sequence[int], rng: np.random.Generator, joint: bool = False):
        super().__init__()
        self.ir_branch = IrBranch(widths, rng)
        spec = UNetSpec(in_channels=3, out_channels=3, widths=list(widths), fusion_points=list(fusion_points))
        self.hdr_branch = HdrBranch(spec, rng)
        self.joint = joint

    def forward(self, sdr: Tensor, ir: Tensor) -> Tensor:
        if sdr.shape[0] != ir.shape[0] or sdr.shape[2:] != ir.shape[2:]:
            raise ShapeMismatchError(f"SDR {sdr.shape} and IR {ir.shape} must share batch and size")
        if self.ir_branch.prefix_frozen:
            with no_grad():
                features = self.ir_branch.features(ir)
        else:
            features = self.ir_branch.features(ir)
        return self.hdr_branch(sdr, features)

    def trainable_parameters(self) -> List[Parameter]:
        params = [p for p in self.hdr_branch.parameters() if not p.frozen]
        if self.joint:
            params += [p for p in self.ir_branch.prefix_parameters() if not p.frozen]
        return params


class RgbVariant(Module):
    """Plain U-Net on the SDR frame; takes no IR input."""

    uses_ir = False

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        super().__init__()
        self.unet = UNet(UNetSpec(in_channels=3, out_channels=3, widths=list(widths)), rng)

    def forward(self, sdr: Tensor) -> Tensor:
        return self.unet(sdr)

    def trainable_parameters(self) -> List[Parameter]:
        return self.parameters()


class PixelFusionVariant(Module):
    """U-Net fed the normalized IR frame as a fourth input channel."""

    uses_ir = True

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        super().__init__()
        self.unet = UNet(UNetSpec(in_channels=4, out_channels=3, widths=list(widths)), rng)

    def forward(self, sdr: Tensor, ir: Tensor) -> Tensor:
        return self.unet(concat_channels([sdr, ir]))

    def trainable_parameters(self) -> List[Parameter]:
        return self.parameters()


class Discriminator(Module):
    """Patch classifier: three stride-2 convs and a stride-1 conv to one channel, 31 px receptive field."""

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, width, 3, stride=2, padding=1, rng=rng)
        self.conv2 = Conv2d(width, 2 * width, 3, stride=2, padding=1, rng=rng)
        self.conv3 = Conv2d(2 * width, 4 * width, 3, stride=2, padding=1, rng=rng)
        self.patch = Conv2d(4 * width, 1, 3, stride=1, padding=1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = leaky_relu(self.conv1(x), 0.2)
        x = leaky_relu(self.conv2(x), 0.2)
        x = leaky_relu(self.conv3(x), 0.2)
        return sigmoid(self.patch(x))


class PerceptualExtractor(Module):
    """Fixed, seeded random conv pyramid standing in for a pretrained feature network."""

    def __init__(self, seed: int = settings.PERCEPTUAL_SEED, in_channels: int = 3, widths: Sequence[int] = (8, 16, 32)):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.stage1 = Conv2d(in_channels, widths[0], 3, rng=rng)
        self.stage2 = Conv2d(widths[0], widths[1], 3, rng=rng)
        self.stage3 = Conv2d(widths[1], widths[2], 3, rng=rng)
        self.freeze()
        self.eval()

    def forward(self, x: Tensor) -> List[Tensor]:
        f1 = relu(self.stage1(x))
        f2 = relu(self.stage2(maxpool2x2(f1)))
        f3 = relu(self.stage3(maxpool2x2(f2)))
        return [f1, f2, f3]


def pixel_loss(out: Tensor, gt: Tensor) -> Tensor:
    """0.99 * mean|gt - out| + 0.01 * (1 - cos(gt, out)) over the flattened tensors."""
    if out.shape != gt.shape:
        raise ShapeMismatchError(f"pixel loss operands differ: {out.shape} vs {gt.shape}")
    l1 = l1_mean(out, gt) * PIXEL_L1_WEIGHT
    if not np.any(gt.data):
        logger.warning("Ground truth has zero norm; skipping the cosine term")
        return l1
    return l1 + (1.0 - cosine_sim(out, gt)) * PIXEL_COS_WEIGHT


def perceptual_loss(out: Tensor, gt: Tensor, extractor: PerceptualExtractor) -> Tensor:
    if out.shape != gt.shape:
        raise ShapeMismatchError(f"perceptual loss operands differ: {out.shape} vs {gt.shape}")
    with no_grad():
        targets = extractor(gt.detach())
    stages = extractor(out)
    total = l1_mean(stages[0], targets[0])
    for feature, target in zip(stages[1:], targets[1:]):
        total = total + l1_mean(feature, target)
    return total * (1.0 / len(stages))


def gan_losses(disc: Discriminator, real: Tensor, fake: Tensor) -> Tuple[Tensor, Tensor]:
    """Non-saturating GAN losses; the discriminator loss sees a detached fake."""
    if real.shape != fake.shape:
        raise ShapeMismatchError(f"real {real.shape} and fake {fake.shape} differ")
    d_loss = bce(disc(real.detach()), 1.0) + bce(disc(fake.detach()), 0.0)
    g_loss = bce(disc(fake), 1.0)
    return d_loss, g_loss


class LossTerms(NamedTuple):
    total: Tensor
    pixel: Tensor
    perceptual: Tensor
    generator: Optional[Tensor] = None
    discriminator: Optional[Tensor] = None


def hdr_loss(
    out: Tensor,
    gt: Tensor,
    extractor: PerceptualExtractor,
    weights: LossWeights,
    disc: Optional[Discriminator] = None,
) -> LossTerms:
    """pixel + alpha * perceptual + beta * adversarial; with beta 0 or no discriminator the last term is absent."""
    l_pix = pixel_loss(out, gt)
    l_per = perceptual_loss(out, gt, extractor)
    total = l_pix + l_per * weights.alpha
    if disc is None or weights.beta == 0:
        return LossTerms(total, l_pix, l_per)
    d_loss, g_loss = gan_losses(disc, gt, out)
    return LossTerms(total + g_loss * weights.beta, l_pix, l_per, g_loss, d_loss)


class LogRadianceCodec:
    """Network output domain: log(1 + E / E0)."""

    def __init__(self, e0: float):
        if not e0 > 0:
            raise ValueError(f"radiance scale must be positive, got {e0}")
        self.e0 = float(e0)

    @classmethod
    def from_radiance(cls, images: Sequence[RadianceImage]) -> "LogRadianceCodec":
        values = np.concatenate([img.data.ravel() for img in images])
        e0 = float(np.median(values))
        if e0 <= 0:
            positive = values[values > 0]
            e0 = float(np.median(positive)) if positive.size else 1.0
        return cls(e0)

    def encode(self, radiance: np.ndarray) -> np.ndarray:
        return np.log1p(np.asarray(radiance, dtype=np.float64) / self.e0).astype(np.float32)

    def decode(self, encoded: np.ndarray) -> np.ndarray:
        return self.e0 * np.expm1(np.maximum(np.asarray(encoded, dtype=np.float64), 0.0))


def build_ablation_variant(kind: AblationKind, config: TrainConfig) -> Module:
    """rgb: SDR-only U-Net; pixel: IR as a fourth channel; combined: joint two-branch; full: two-stage two-branch."""
    kind = AblationKind(kind)
    rng = np.random.default_rng(config.seed)
    if kind == AblationKind.RGB:
        return RgbVariant(config.widths, rng)
    if kind == AblationKind.PIXEL:
        return PixelFusionVariant(config.widths, rng)
    return HdrtNet(config.widths, config.fusion_points, rng, joint=kind == AblationKind.COMBINED)


def _pad_amount(size: int) -> int:
    return (-size) % 16


def _pad(array: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    if not (pad_h or pad_w):
        return array
    mode = "reflect" if pad_h < array.shape[2] and pad_w < array.shape[3] else "edge"
    return np.pad(array, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode=mode)


def infer(model: Module, sdr: SdrImage, ir: Optional[IrImage], codec: LogRadianceCodec) -> RadianceImage:
    """Reconstruct radiance from a registered SDR frame and IR frame of the same size."""
    if ir is not None and (ir.height, ir.width) != (sdr.height, sdr.width):
        raise ShapeMismatchError(f"SDR is {sdr.width}x{sdr.height} but IR is {ir.width}x{ir.height}")
    pad_h, pad_w = _pad_amount(sdr.height), _pad_amount(sdr.width)
    sdr_input = _pad(sdr_to_unit(sdr).transpose(2, 0, 1)[None], pad_h, pad_w)
    model.eval()
    with no_grad():
        if getattr(model, "uses_ir", False):
            if ir is None:
                raise ShapeMismatchError("this model needs an IR frame")
            ir_input = _pad(ir_to_unit(ir)[None, None], pad_h, pad_w)
            out = model(Tensor(sdr_input), Tensor(ir_input))
        else:
            out = model(Tensor(sdr_input))
    encoded = out.data[0, :, :sdr.height, :sdr.width].transpose(1, 2, 0)
    return RadianceImage(codec.decode(encoded))
