"""Matplotlib panels for predictions and critic triplets."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from boundary_transfer.datamodel import Image, Mask, Triplet, binarize, masked_image  # noqa: E402


def _rgb(array: np.ndarray) -> np.ndarray:
    return array[:, :, 0] if array.shape[2] == 1 else array


def _select(data, index: int):
    return data[index] if data.ndim == 4 else data


def overlay_panel(
    image: Image, soft: Mask, path: Union[Path, str], threshold: float = 0.5, title: str = ""
) -> Path:
    """Input | hard mask | masked foreground, side by side."""
    hard = binarize(soft, threshold)
    panels = [
        ("input", _rgb(image.to_array()), None),
        ("mask", hard.to_array(), "gray"),
        ("foreground", _rgb(masked_image(image, hard).to_array()), None),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, (name, array, cmap) in zip(axes, panels):
        ax.imshow(array, cmap=cmap, vmin=0, vmax=1)
        ax.set_title(name)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def triplet_panel(triplets: Mapping[str, Triplet], index: int, path: Union[Path, str]) -> Path:
    """One row per triplet: image, mask and masked image of batch element ``index``."""
    fig, axes = plt.subplots(len(triplets), 3, figsize=(7.5, 2.5 * len(triplets)), squeeze=False)
    for row, (name, triplet) in zip(axes, triplets.items()):
        image = _select(triplet.image.data, index).detach().cpu().numpy().transpose(1, 2, 0)
        mask = _select(triplet.mask.data, index).detach().cpu().numpy()[0]
        masked = _select(triplet.masked_image.data, index).detach().cpu().numpy().transpose(1, 2, 0)
        for ax, array, label, cmap in zip(
            row,
            (_rgb(image), mask, _rgb(masked)),
            ("image", "mask", "masked"),
            (None, "gray", None),
        ):
            ax.imshow(np.clip(array, 0, 1), cmap=cmap, vmin=0, vmax=1)
            ax.set_title(f"{name} {label}", fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
