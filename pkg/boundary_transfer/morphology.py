"""
Binary morphology with closed-disk structuring elements and the boundary weight map.

Dilation and erosion are computed as a zero-padded correlation of the mask with the disk followed
by a threshold: any hit for dilation, a full count for erosion. Zero padding makes every pixel
outside the grid background for both operations, so erosion shrinks masks touching the border and
``erode = not dilate not`` holds exactly on pixels at least ``r`` away from it.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from boundary_transfer.datamodel import Mask, binarize
from boundary_transfer.errors import InvalidValueError, ShapeMismatchError, SoftMaskError

Radius = Union[int, Sequence[int]]


@dataclass(frozen=True)
class DiskStrel:
    """Closed disk of integer radius: every offset with ``dy**2 + dx**2 <= r**2``."""

    radius: int
    offsets: frozenset[tuple[int, int]]

    @classmethod
    def of(cls, radius: int) -> "DiskStrel":
        return _disk(int(radius))

    @property
    def size(self) -> int:
        return len(self.offsets)

    def footprint(self) -> np.ndarray:
        r = self.radius
        grid = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
        for dy, dx in self.offsets:
            grid[dy + r, dx + r] = True
        return grid

    def kernel(self, dtype: torch.dtype, device: torch.device | str = "cpu") -> torch.Tensor:
        return torch.from_numpy(self.footprint()).to(dtype=dtype, device=device)[None, None]


@functools.lru_cache(maxsize=128)
def _disk(radius: int) -> DiskStrel:
    if radius < 0:
        raise InvalidValueError(f"disk radius must be non-negative, got {radius}")
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    inside = dy**2 + dx**2 <= radius**2
    offsets = frozenset(zip(dy[inside].tolist(), dx[inside].tolist()))
    return DiskStrel(radius=radius, offsets=offsets)


def _check_radius(r: int, height: int, width: int) -> None:
    if not 1 <= r < min(height, width) / 2:
        raise InvalidValueError(f"radius must satisfy 1 <= r < {min(height, width) / 2}, got {r}")


def _hit_count(data: torch.Tensor, r: int) -> torch.Tensor:
    """Number of foreground pixels under the disk centred on every pixel."""
    shape = data.shape
    flat = data.reshape(-1, 1, shape[-2], shape[-1])
    counts = F.conv2d(flat, DiskStrel.of(r).kernel(flat.dtype, flat.device), padding=r)
    return counts.reshape(shape)


def _morph(m: Mask, r: Radius, erode: bool) -> Mask:
    if not m.hard:
        raise SoftMaskError("morphology needs a hard mask; binarize predictions first")
    data = m.data.detach()
    radii = [int(r)] if isinstance(r, (int, np.integer)) else [int(v) for v in r]
    for radius in set(radii):
        _check_radius(radius, m.height, m.width)

    def apply(block: torch.Tensor, radius: int) -> torch.Tensor:
        counts = _hit_count(block, radius)
        if erode:
            hits = counts > DiskStrel.of(radius).size - 0.5
        else:
            hits = counts > 0.5
        return hits.to(block.dtype)

    if len(radii) == 1:
        return Mask(apply(data, radii[0]), hard=True)

    if not m.batched or len(radii) != data.shape[0]:
        raise ShapeMismatchError(f"{len(radii)} radii for a mask batch of shape {m.shape}")
    out = torch.empty_like(data)
    for radius in sorted(set(radii)):
        index = torch.tensor([i for i, v in enumerate(radii) if v == radius], device=data.device)
        out[index] = apply(data[index], radius)
    return Mask(out, hard=True)


def dilate(m: Mask, r: Radius) -> Mask:
    """Binary dilation with a disk of radius ``r`` (one radius, or one per batch element)."""
    return _morph(m, r, erode=False)


def erode(m: Mask, r: Radius) -> Mask:
    """Binary erosion with a disk of radius ``r``; out-of-grid pixels count as background."""
    return _morph(m, r, erode=True)


def weight_map(m: Mask, r: Radius) -> Mask:
    """Band of pixels within distance ``r`` of the mask boundary: ``dilate - erode``.

    Soft masks are binarized at 0.5 first. The result carries no gradient.
    """
    hard = m if m.hard else binarize(m)
    return Mask(dilate(hard, r).data - erode(hard, r).data, hard=True)
