"""
Core value types: images, masks, labeled samples, datasets and critic triplets.

Rasters are channel-first torch tensors. A single image is ``(C, H, W)``, a batch is
``(N, C, H, W)``; masks always carry one channel. ``from_array`` / ``to_array`` convert from and to
the ``H x W x C`` numpy layout used on disk.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from boundary_transfer.config import TrainingConfig
from boundary_transfer.errors import InvalidValueError, ShapeMismatchError, SoftMaskError

# bilinear resampling can overshoot [0, 1] by a few ulps
RANGE_TOLERANCE = 1e-6
MIN_IMAGE_SIDE = 8

__all__ = [
    "Image",
    "Mask",
    "LabeledSample",
    "SourceDataset",
    "TargetDataset",
    "Side",
    "Kind",
    "Triplet",
    "TrainingConfig",
    "complement",
    "masked_image",
    "binarize",
]


def _check_range(data: torch.Tensor, what: str) -> None:
    with torch.no_grad():
        if not bool(torch.isfinite(data).all()):
            raise InvalidValueError(f"{what} contains non-finite values")
        if data.numel() and (
            float(data.min()) < -RANGE_TOLERANCE or float(data.max()) > 1 + RANGE_TOLERANCE
        ):
            raise InvalidValueError(f"{what} values must lie in [0, 1]")


@dataclass(frozen=True)
class Image:
    """An image or a batch of images with values in [0, 1]."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim not in (3, 4):
            raise ShapeMismatchError(f"image tensor must be (C,H,W) or (N,C,H,W), got {self.shape}")
        if self.height < MIN_IMAGE_SIDE or self.width < MIN_IMAGE_SIDE:
            raise ShapeMismatchError(
                f"image sides must be >= {MIN_IMAGE_SIDE}, got {self.height}x{self.width}"
            )
        _check_range(self.data, "image")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def batched(self) -> bool:
        return self.data.ndim == 4

    @classmethod
    def from_array(cls, array: np.ndarray, dtype: torch.dtype = torch.float32) -> "Image":
        """Build an image from an ``H x W`` or ``H x W x C`` array with values in [0, 1]."""
        array = np.asarray(array)
        if array.ndim == 2:
            array = array[:, :, None]
        return cls(torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).to(dtype))

    def to_array(self) -> np.ndarray:
        """Return the unbatched image as an ``H x W x C`` float array."""
        if self.batched:
            raise ShapeMismatchError("to_array expects a single image, not a batch")
        return self.data.detach().cpu().numpy().transpose(1, 2, 0)

    @classmethod
    def stack(cls, images: Sequence["Image"]) -> "Image":
        return cls(torch.stack([image.data for image in images]))


@dataclass(frozen=True)
class Mask:
    """A single-channel mask (or batch of masks). Hard masks hold only 0 and 1."""

    data: torch.Tensor
    hard: bool = False

    def __post_init__(self):
        if self.data.ndim not in (3, 4) or self.data.shape[-3] != 1:
            raise ShapeMismatchError(f"mask tensor must be (1,H,W) or (N,1,H,W), got {self.shape}")
        _check_range(self.data, "mask")
        if self.hard:
            with torch.no_grad():
                if not bool(((self.data == 0) | (self.data == 1)).all()):
                    raise SoftMaskError("hard mask contains values other than 0 and 1")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def batched(self) -> bool:
        return self.data.ndim == 4

    @classmethod
    def from_array(
        cls, array: np.ndarray, hard: bool = True, dtype: torch.dtype = torch.float32
    ) -> "Mask":
        """Build a mask from an ``H x W`` array."""
        array = np.asarray(array)
        return cls(torch.from_numpy(np.ascontiguousarray(array[None])).to(dtype), hard=hard)

    def to_array(self) -> np.ndarray:
        if self.batched:
            raise ShapeMismatchError("to_array expects a single mask, not a batch")
        return self.data.detach().cpu().numpy()[0]

    @classmethod
    def stack(cls, masks: Sequence["Mask"]) -> "Mask":
        return cls(torch.stack([mask.data for mask in masks]), hard=all(m.hard for m in masks))

    def foreground_fraction(self) -> float:
        return float(binarize(self).data.float().mean())


def _check_pair(image_shape: Sequence[int], mask_shape: Sequence[int]) -> None:
    if tuple(image_shape[-2:]) != tuple(mask_shape[-2:]):
        raise ShapeMismatchError(
            f"image {tuple(image_shape[-2:])} and mask {tuple(mask_shape[-2:])} sizes differ"
        )
    if len(image_shape) == 4 and len(mask_shape) == 4 and image_shape[0] != mask_shape[0]:
        raise ShapeMismatchError(
            f"image batch {image_shape[0]} and mask batch {mask_shape[0]} differ"
        )


def complement(m: Mask) -> Mask:
    """Return ``1 - m``; hardness is preserved."""
    return Mask(1 - m.data, hard=m.hard)


def masked_image(x: Image, m: Mask) -> Image:
    """Pixel-wise product of an image and a (possibly soft) mask, broadcast over channels."""
    _check_pair(x.shape, m.shape)
    return Image(m.data * x.data)


def binarize(m: Mask, threshold: float = 0.5) -> Mask:
    """Hard mask with 1 wherever ``m >= threshold``."""
    return Mask((m.data.detach() >= threshold).to(m.data.dtype), hard=True)


@dataclass(frozen=True)
class LabeledSample:
    image: Image
    mask: Mask
    stem: Optional[str] = None
    category: Optional[str] = None

    def __post_init__(self):
        if self.image.batched or self.mask.batched:
            raise ShapeMismatchError("a labeled sample holds one image and one mask")
        if not self.mask.hard:
            raise SoftMaskError(f"ground-truth mask of {self.stem or 'sample'} must be hard")
        _check_pair(self.image.shape, self.mask.shape)


def _stack_images(images: Iterable[Image]) -> torch.Tensor:
    return torch.stack([image.data for image in images])


@dataclass(frozen=True)
class SourceDataset:
    """Fully labeled source pool.

    ``category_vocabulary`` lists every declared source category, including ones that currently
    have no samples; it defaults to the categories present.
    """

    samples: tuple[LabeledSample, ...]
    category_labels: tuple[Optional[str], ...] = ()
    category_vocabulary: frozenset[str] = frozenset()
    suspect_stems: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "suspect_stems", tuple(self.suspect_stems))
        labels = tuple(self.category_labels) or tuple(s.category for s in self.samples)
        if len(labels) != len(self.samples):
            raise ShapeMismatchError(
                f"{len(labels)} category labels for {len(self.samples)} source samples"
            )
        object.__setattr__(self, "category_labels", labels)
        present = {label for label in labels if label is not None}
        vocabulary = frozenset(self.category_vocabulary) | present
        object.__setattr__(self, "category_vocabulary", vocabulary)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def has_categories(self) -> bool:
        return any(label is not None for label in self.category_labels)

    def image_tensor(self) -> torch.Tensor:
        return _stack_images(s.image for s in self.samples)

    def mask_tensor(self) -> torch.Tensor:
        return torch.stack([s.mask.data for s in self.samples])


@dataclass(frozen=True)
class TargetDataset:
    """Target pool split into a few labeled samples and many unlabeled images.

    The unlabeled pool only exposes images. Masks withheld from training are reachable through
    ``withheld_samples`` and the evaluation split through ``evaluation_samples``; neither is used
    by the training path.
    """

    labeled: tuple[LabeledSample, ...]
    unlabeled: tuple[Image, ...]
    category_labels: tuple[Optional[str], ...] = ()
    budget: Optional[int] = None
    suspect_stems: tuple[str, ...] = ()
    _evaluation: tuple[LabeledSample, ...] = field(default=(), repr=False)
    _withheld: tuple[LabeledSample, ...] = field(default=(), repr=False)

    def __post_init__(self):
        object.__setattr__(self, "labeled", tuple(self.labeled))
        object.__setattr__(self, "suspect_stems", tuple(self.suspect_stems))
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))
        labels = tuple(self.category_labels) or tuple(s.category for s in self.labeled) + (
            (None,) * len(self.unlabeled)
        )
        if len(labels) != len(self.labeled) + len(self.unlabeled):
            raise ShapeMismatchError(
                f"{len(labels)} category labels for "
                f"{len(self.labeled) + len(self.unlabeled)} target training entries"
            )
        object.__setattr__(self, "category_labels", labels)
        budget = len(self.labeled) if self.budget is None else self.budget
        if budget != len(self.labeled):
            raise ShapeMismatchError(
                f"labeled subset has {len(self.labeled)} samples, budget is {budget}"
            )
        object.__setattr__(self, "budget", budget)
        for image in self.unlabeled:
            if image.batched:
                raise ShapeMismatchError("unlabeled pool entries must be single images")

    def __len__(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    @property
    def categories(self) -> frozenset[str]:
        known = [label for label in self.category_labels if label is not None]
        known += [s.category for s in self._evaluation if s.category is not None]
        return frozenset(known)

    def training_images(self) -> tuple[Image, ...]:
        return tuple(s.image for s in self.labeled) + self.unlabeled

    def evaluation_samples(self) -> tuple[LabeledSample, ...]:
        return self._evaluation

    def withheld_samples(self) -> tuple[LabeledSample, ...]:
        return self._withheld


class Side(str, enum.Enum):
    OUTER = "outer"
    INNER = "inner"


class Kind(str, enum.Enum):
    REAL = "real"
    FAKE = "fake"
    PSEUDO = "pseudo"
    INTERPOLATED = "interpolated"


@dataclass(frozen=True)
class Triplet:
    """Critic input ``[image, mask, masked_image]`` for a batch, tagged with side and kind."""

    image: Image
    mask: Mask
    masked_image: Image
    side: Side
    kind: Kind

    def __post_init__(self):
        _check_pair(self.image.shape, self.mask.shape)
        if self.image.shape != self.masked_image.shape:
            raise ShapeMismatchError(
                f"image {self.image.shape} and masked image {self.masked_image.shape} differ"
            )
        if self.kind is not Kind.INTERPOLATED:
            with torch.no_grad():
                expected = self.mask.data * self.image.data
                if not torch.allclose(self.masked_image.data, expected, rtol=0, atol=1e-6):
                    raise InvalidValueError(
                        f"{self.kind.value} triplet: masked_image != mask*image"
                    )

    @property
    def batch_size(self) -> int:
        return self.image.shape[0] if self.image.batched else 1

    def to_input(self) -> torch.Tensor:
        """Channel-concatenated critic input, ``2C + 1`` channels."""
        return torch.cat([self.image.data, self.mask.data, self.masked_image.data], dim=-3)
