"""
Affine warping of images and masks, and the random transform distribution used by the
self-supervised equivariance loss and by labeled-batch augmentation.

Matrices are ``2 x 3`` in (row, col) coordinate order and map *output* pixel coordinates,
normalized to [-1, 1] at pixel centres, to *input* coordinates. Samples that fall outside the
input are zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, TypeVar, Union

import numpy as np
import torch
import torch.nn.functional as F

from boundary_transfer.config import TrainingConfig
from boundary_transfer.datamodel import Image, Mask, binarize
from boundary_transfer.errors import DegenerateTransformError, ShapeMismatchError

MIN_ABS_DET = 1e-6

Raster = TypeVar("Raster", Image, Mask)

# swaps (row, col) <-> (x, y), the order affine_grid expects
_SWAP = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)


@dataclass(frozen=True)
class AffineTransform:
    matrix: torch.Tensor

    def __post_init__(self):
        matrix = torch.as_tensor(self.matrix, dtype=torch.float64)
        if matrix.shape[-2:] != (2, 3) or matrix.ndim not in (2, 3):
            raise ShapeMismatchError(f"affine matrix must be (2,3) or (N,2,3), got {matrix.shape}")
        det = torch.linalg.det(matrix[..., :2])
        if bool((det.abs() <= MIN_ABS_DET).any()):
            raise DegenerateTransformError(f"affine linear part is singular (det={det.tolist()})")
        object.__setattr__(self, "matrix", matrix)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64))

    @classmethod
    def translation(cls, dy: float, dx: float, height: int, width: int) -> "AffineTransform":
        """Shift content by ``(dy, dx)`` pixels; vacated pixels become zero."""
        return cls(
            torch.tensor(
                [[1.0, 0.0, -2.0 * dy / height], [0.0, 1.0, -2.0 * dx / width]],
                dtype=torch.float64,
            )
        )

    @classmethod
    def stack(cls, transforms: Sequence["AffineTransform"]) -> "AffineTransform":
        return cls(torch.stack([t.matrix for t in transforms]))

    @property
    def batched(self) -> bool:
        return self.matrix.ndim == 3

    @property
    def linear(self) -> torch.Tensor:
        return self.matrix[..., :2]

    @property
    def shift(self) -> torch.Tensor:
        return self.matrix[..., 2]

    def is_identity(self) -> bool:
        identity = AffineTransform.identity().matrix.expand_as(self.matrix)
        return bool(torch.equal(self.matrix, identity))

    def inverse(self) -> "AffineTransform":
        inv = torch.linalg.inv(self.linear)
        t = -(inv @ self.shift.unsqueeze(-1))
        return AffineTransform(torch.cat([inv, t], dim=-1))

    def theta(self, dtype: torch.dtype, device: torch.device | str) -> torch.Tensor:
        """The matrix in ``affine_grid`` layout, always batched."""
        m = self.matrix if self.batched else self.matrix[None]
        linear = _SWAP @ m[..., :2] @ _SWAP
        shift = (_SWAP @ m[..., 2:]).reshape(-1, 2, 1)
        return torch.cat([linear, shift], dim=-1).to(dtype=dtype, device=device)


def warp(x: Raster, A: AffineTransform) -> Raster:
    """Bilinear resampling of an image or mask under ``A``. Warped masks are soft."""
    if A.is_identity():
        return x
    data = x.data if x.batched else x.data[None]
    theta = A.theta(data.dtype, data.device)
    if theta.shape[0] == 1 and data.shape[0] > 1:
        theta = theta.expand(data.shape[0], 2, 3)
    if theta.shape[0] != data.shape[0]:
        raise ShapeMismatchError(f"{theta.shape[0]} transforms for a batch of {data.shape[0]}")
    grid = F.affine_grid(theta, list(data.shape), align_corners=False)
    out = F.grid_sample(data, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    if not x.batched:
        out = out[0]
    if isinstance(x, Mask):
        return Mask(out, hard=False)
    return Image(out)


def compose_transform(
    angle_deg: float, scale: float, shift: Sequence[float] = (0.0, 0.0), flip: bool = False
) -> AffineTransform:
    """Rotation, isotropic scale, optional left-right flip and a shift given as a fraction of
    the image size."""
    a = math.radians(angle_deg)
    rotation = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    mirror = np.diag([1.0, -1.0 if flip else 1.0])
    linear = scale * rotation @ mirror
    t = 2.0 * np.asarray(shift, dtype=np.float64).reshape(2, 1)
    return AffineTransform(torch.from_numpy(np.concatenate([linear, t], axis=1)))


def sample_transform(rng: np.random.Generator, config: TrainingConfig) -> AffineTransform:
    angle = rng.uniform(-config.rotation_max_deg, config.rotation_max_deg)
    scale = rng.uniform(config.scale_min, config.scale_max)
    shift = rng.uniform(-config.shift_max, config.shift_max, size=2)
    flip = bool(rng.random() < config.flip_prob)
    return compose_transform(angle, scale, shift, flip)


def sample_transforms(rng: np.random.Generator, n: int, config: TrainingConfig) -> AffineTransform:
    return AffineTransform.stack([sample_transform(rng, config) for _ in range(n)])


def augment_pair(x: Image, m: Mask, A: Union[AffineTransform, None]) -> tuple[Image, Mask]:
    """Warp an image and its ground truth together; the mask is re-binarized at 0.5."""
    if A is None:
        return x, m
    return warp(x, A), binarize(warp(m, A))
