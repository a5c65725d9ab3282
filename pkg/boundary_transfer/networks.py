"""
Segmentation network and boundary critics.

The segmenter is a pluggable encoder-decoder chosen by name from ``BACKBONES``; every backbone
returns logits and ``SegmentationNetwork`` squashes them with a sigmoid. Critics are strided
convolutional encoders with a linear scalar head and no batch-coupling normalization.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn

from boundary_transfer.config import TrainingConfig
from boundary_transfer.datamodel import Image, Mask, Side, Triplet
from boundary_transfer.errors import ConfigError, ShapeMismatchError, SideMismatchError
from boundary_transfer.triplets import joint_input

logger = logging.getLogger(__name__)

JOINT = "joint"


@dataclass(frozen=True)
class SegmenterSpec:
    backbone: str = "unet"
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128)
    image_size: int = 128

    @classmethod
    def from_dict(cls, values: dict) -> "SegmenterSpec":
        return cls(**{**values, "widths": tuple(values["widths"])})


@dataclass(frozen=True)
class CriticSpec:
    side: str = Side.OUTER.value
    in_channels: int = 7
    width: int = 32
    depth: int = 5

    @classmethod
    def from_dict(cls, values: dict) -> "CriticSpec":
        return cls(**values)


BACKBONES: dict[str, Callable[[SegmenterSpec], nn.Module]] = {}


def register_backbone(name: str):
    def wrap(factory: Callable[[SegmenterSpec], nn.Module]):
        BACKBONES[name] = factory
        return factory

    return wrap


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


def conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.GroupNorm(_groups(out_channels), out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, padding=1),
        nn.GroupNorm(_groups(out_channels), out_channels),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """U-shaped encoder-decoder with one skip connection per level."""

    def __init__(self, in_channels: int, widths: tuple[int, ...]):
        super().__init__()
        self.encoders = nn.ModuleList()
        channels = in_channels
        for width in widths[:-1]:
            self.encoders.append(conv_block(channels, width))
            channels = width
        self.pool = nn.MaxPool2d(2)
        self.middle = conv_block(channels, widths[-1])

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        channels = widths[-1]
        for width in reversed(widths[:-1]):
            self.ups.append(nn.ConvTranspose2d(channels, width, kernel_size=2, stride=2))
            self.decoders.append(conv_block(2 * width, width))
            channels = width
        self.final = nn.Conv2d(channels, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.middle(x)
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = decoder(torch.cat([up(x), skip], dim=1))
        return self.final(x)


class ShallowNet(nn.Module):
    """Two convolutions; small and smooth enough for finite-difference checks."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(torch.tanh(self.conv1(x)))


@register_backbone("unet")
def _unet(spec: SegmenterSpec) -> nn.Module:
    levels = len(spec.widths) - 1
    if spec.image_size % (2**levels):
        raise ConfigError(
            f"image_size {spec.image_size} must be divisible by {2**levels} "
            f"for a {len(spec.widths)}-level unet"
        )
    return UNet(spec.in_channels, spec.widths)


@register_backbone("shallow")
def _shallow(spec: SegmenterSpec) -> nn.Module:
    return ShallowNet(spec.in_channels, spec.widths[0])


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled uniform weights and zero biases for every conv and linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class SegmentationNetwork(nn.Module):
    def __init__(self, spec: SegmenterSpec):
        super().__init__()
        if spec.backbone not in BACKBONES:
            raise ConfigError(
                f"unknown segmenter backbone {spec.backbone!r}; choose from {sorted(BACKBONES)}"
            )
        self.spec = spec
        self.body = BACKBONES[spec.backbone](spec)

    @property
    def image_size(self) -> int:
        return self.spec.image_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.body(x))


class BoundaryCritic(nn.Module):
    """Strided conv encoder, global average pool and a linear head giving one score per input."""

    def __init__(self, spec: CriticSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        channels = spec.in_channels
        for i in range(spec.depth):
            width = spec.width * 2 ** min(i, 3)
            layers += [
                nn.Conv2d(channels, width, kernel_size=3, stride=2, padding=1),
                nn.LeakyReLU(negative_slope=0.2),
            ]
            channels = width
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Linear(channels, 1)

    @property
    def side(self) -> str:
        return self.spec.side

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x).mean(dim=(-2, -1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.spec.in_channels:
            raise ShapeMismatchError(
                f"{self.side} critic expects {self.spec.in_channels} channels, got {x.shape[-3]}"
            )
        return self.head(self.features(x)).squeeze(-1)


def _seeded(seed: Optional[int], build: Callable[[], nn.Module]) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        module = build()
        init_weights(module)
    return module


def segmenter_spec(config: TrainingConfig, in_channels: int = 3) -> SegmenterSpec:
    return SegmenterSpec(
        backbone=config.segmenter_backbone,
        in_channels=in_channels,
        widths=tuple(config.segmenter_widths),
        image_size=config.image_size,
    )


def critic_spec(config: TrainingConfig, side: str, in_channels: int = 3) -> CriticSpec:
    triplet_channels = 2 * in_channels + 1
    return CriticSpec(
        side=side,
        in_channels=2 * triplet_channels if side == JOINT else triplet_channels,
        width=config.critic_width,
        depth=config.critic_depth,
    )


def build_segmenter(
    config: TrainingConfig, in_channels: int = 3, seed: Optional[int] = None
) -> SegmentationNetwork:
    spec = segmenter_spec(config, in_channels)
    return _seeded(seed, lambda: SegmentationNetwork(spec))


def build_critic(
    config: TrainingConfig, side: str, in_channels: int = 3, seed: Optional[int] = None
) -> BoundaryCritic:
    spec = critic_spec(config, side, in_channels)
    return _seeded(seed, lambda: BoundaryCritic(spec))


def _check_resolution(net: SegmentationNetwork, x: Image) -> None:
    if (x.height, x.width) != (net.image_size, net.image_size):
        raise ShapeMismatchError(
            f"segmenter works at {net.image_size}x{net.image_size}, got {x.height}x{x.width}"
        )
    if x.channels != net.spec.in_channels:
        raise ShapeMismatchError(
            f"segmenter expects {net.spec.in_channels} channels, got {x.channels}"
        )


def segment(net: SegmentationNetwork, x: Image) -> Mask:
    """Soft foreground mask for ``x``, keeping the autograd graph."""
    _check_resolution(net, x)
    data = x.data if x.batched else x.data[None]
    out = net(data)
    return Mask(out if x.batched else out[0], hard=False)


def predict(net: SegmentationNetwork, x: Image) -> Mask:
    """Inference-mode ``segment``: no gradient, deterministic."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return segment(net, x)
    finally:
        net.train(was_training)


def criticize(critic: BoundaryCritic, *triplets: Triplet) -> torch.Tensor:
    """Scores of shape ``(N,)`` for a triplet batch or an outer/inner pair (joint critic)."""
    return critic(critic_input(critic, *triplets))


def critic_input(critic: BoundaryCritic, *triplets: Triplet) -> torch.Tensor:
    """The batched channel-concatenated tensor ``critic`` reads for these triplets."""
    if critic.side == JOINT:
        if len(triplets) != 2:
            raise SideMismatchError("the joint critic scores an (outer, inner) triplet pair")
        x = joint_input(*triplets)
    else:
        if len(triplets) != 1:
            raise SideMismatchError(f"the {critic.side} critic scores exactly one triplet")
        (triplet,) = triplets
        if triplet.side.value != critic.side:
            raise SideMismatchError(
                f"{triplet.side.value} triplet passed to the {critic.side} critic"
            )
        x = triplet.to_input()
    return x[None] if x.ndim == 3 else x


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def describe(module: nn.Module) -> dict:
    spec = getattr(module, "spec")
    values = asdict(spec)
    values["parameters"] = sum(p.numel() for p in module.parameters())
    return values
