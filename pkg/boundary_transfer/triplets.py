"""
Critic inputs. Every triplet is ``[image, mask, mask * image]``:

* fake: target image with the current (soft) prediction,
* real: source image with its ground truth,
* pseudo: source image with a deliberately leaky ground truth (dilated by a disk),
* interpolated: a convex mix of a real and a fake triplet, used by the gradient penalty.

Outer triplets describe the foreground, inner triplets the background (complemented masks).
"""

from __future__ import annotations

from typing import Literal, Sequence, Union

import numpy as np
import torch

from boundary_transfer.config import TrainingConfig
from boundary_transfer.datamodel import Image, Kind, Mask, Side, Triplet, complement, masked_image
from boundary_transfer.errors import (
    InvalidValueError,
    ShapeMismatchError,
    SideMismatchError,
    SoftMaskError,
)
from boundary_transfer.morphology import Radius, dilate, erode

Epsilon = Union[float, Sequence[float], np.ndarray, torch.Tensor]


def _build(x: Image, m: Mask, side: Side, kind: Kind) -> Triplet:
    return Triplet(image=x, mask=m, masked_image=masked_image(x, m), side=side, kind=kind)


def _require_hard(m: Mask, what: str) -> None:
    if not m.hard:
        raise SoftMaskError(f"{what} needs a hard ground-truth mask")


def fake_outer(x: Image, m_pred: Mask) -> Triplet:
    """Target image with its predicted foreground; gradients flow back through ``m_pred``."""
    return _build(x, m_pred, Side.OUTER, Kind.FAKE)


def real_outer(x: Image, m: Mask) -> Triplet:
    _require_hard(m, "real_outer")
    return _build(x, m, Side.OUTER, Kind.REAL)


def pseudo_outer(x: Image, m: Mask, r: Radius) -> Triplet:
    """Source foreground grown by ``r`` so that it leaks background around the boundary."""
    _require_hard(m, "pseudo_outer")
    return _build(x, dilate(m, r), Side.OUTER, Kind.PSEUDO)


def fake_inner(x: Image, m_pred: Mask) -> Triplet:
    return _build(x, complement(m_pred), Side.INNER, Kind.FAKE)


def real_inner(x: Image, m: Mask) -> Triplet:
    _require_hard(m, "real_inner")
    return _build(x, complement(m), Side.INNER, Kind.REAL)


def pseudo_inner(
    x: Image, m: Mask, r: Radius, mode: Literal["dilate", "erode"] = "dilate"
) -> Triplet:
    """Source background that leaks object pixels.

    ``mode="dilate"`` grows the complemented mask into the object. ``mode="erode"`` shrinks it
    away from the object instead, which leaks nothing but is kept as a switchable variant.
    """
    _require_hard(m, "pseudo_inner")
    background = complement(m)
    if mode == "dilate":
        leaky = dilate(background, r)
    elif mode == "erode":
        leaky = erode(background, r)
    else:
        raise InvalidValueError(f"unknown inner pseudo mode {mode!r}")
    return _build(x, leaky, Side.INNER, Kind.PSEUDO)


def _epsilon_tensor(eps: Epsilon, reference: torch.Tensor) -> torch.Tensor:
    e = torch.as_tensor(eps, dtype=reference.dtype, device=reference.device)
    if bool(((e < 0) | (e > 1)).any()):
        raise InvalidValueError(f"interpolation weight must lie in [0, 1], got {e.tolist()}")
    if e.ndim == 0:
        return e
    if reference.ndim != 4 or e.numel() != reference.shape[0]:
        raise ShapeMismatchError(
            f"{e.numel()} interpolation weights for a batch of shape {tuple(reference.shape)}"
        )
    return e.reshape(-1, 1, 1, 1)


def interpolate(real: Triplet, fake: Triplet, eps: Epsilon) -> Triplet:
    """``eps * real + (1 - eps) * fake`` on every component; ``eps`` is a scalar or one value per
    batch element."""
    if real.side is not fake.side:
        raise SideMismatchError(f"cannot mix a {real.side.value} and a {fake.side.value} triplet")
    if real.image.shape != fake.image.shape or real.mask.shape != fake.mask.shape:
        raise ShapeMismatchError(
            f"triplet shapes differ: {real.image.shape} vs {fake.image.shape}"
        )
    e = _epsilon_tensor(eps, real.image.data)

    def mix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return e * a + (1 - e) * b

    return Triplet(
        image=Image(mix(real.image.data, fake.image.data)),
        mask=Mask(mix(real.mask.data, fake.mask.data)),
        masked_image=Image(mix(real.masked_image.data, fake.masked_image.data)),
        side=real.side,
        kind=Kind.INTERPOLATED,
    )


def joint_input(outer: Triplet, inner: Triplet) -> torch.Tensor:
    """Outer and inner triplets stacked on the channel axis for a single joint critic."""
    if outer.side is not Side.OUTER or inner.side is not Side.INNER:
        raise SideMismatchError("joint input needs one outer and one inner triplet")
    return torch.cat([outer.to_input(), inner.to_input()], dim=-3)


def sample_radii(rng: np.random.Generator, n: int, config: TrainingConfig) -> list[int]:
    """One disk radius per pseudo triplet, uniform over the configured closed range."""
    return rng.integers(config.radius_min, config.radius_max + 1, size=n).tolist()


def sample_epsilon(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.random(n)
