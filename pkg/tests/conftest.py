import numpy as np
import pytest
import torch

from boundary_transfer.config import TrainingConfig
from boundary_transfer.datamodel import Image, Mask
from boundary_transfer.morphology import DiskStrel
from boundary_transfer.synthetic import SynthSpec, generate_synthetic


def shift_or(m: np.ndarray, offsets, mode: str) -> np.ndarray:
    """Structuring-element scan: for every offset look at the neighbour, out-of-grid is 0."""
    h, w = m.shape
    padded_r = max(max(abs(dy), abs(dx)) for dy, dx in offsets)
    padded = np.zeros((h + 2 * padded_r, w + 2 * padded_r), dtype=bool)
    padded[padded_r : padded_r + h, padded_r : padded_r + w] = m.astype(bool)
    out = np.zeros((h, w), dtype=bool) if mode == "any" else np.ones((h, w), dtype=bool)
    for dy, dx in offsets:
        view = padded[padded_r + dy : padded_r + dy + h, padded_r + dx : padded_r + dx + w]
        out = out | view if mode == "any" else out & view
    return out


def oracle_dilate(m: np.ndarray, r: int) -> np.ndarray:
    return shift_or(m, DiskStrel.of(r).offsets, "any")


def oracle_erode(m: np.ndarray, r: int) -> np.ndarray:
    return shift_or(m, DiskStrel.of(r).offsets, "all")


def hard_mask(array) -> Mask:
    return Mask.from_array(np.asarray(array, dtype=np.float32), hard=True)


def random_image(rng: np.random.Generator, size: int = 8, channels: int = 3, batch=None):
    shape = (size, size, channels) if batch is None else (batch, channels, size, size)
    data = rng.random(shape)
    if batch is None:
        return Image.from_array(data, dtype=torch.float64)
    return Image(torch.from_numpy(data))


def random_hard_batch(rng: np.random.Generator, batch: int, size: int = 8) -> Mask:
    data = (rng.random((batch, 1, size, size)) < 0.5).astype(np.float64)
    return Mask(torch.from_numpy(data), hard=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> TrainingConfig:
    return TrainingConfig(
        image_size=16,
        batch_size=4,
        n_critic=2,
        max_steps=3,
        labeled_budget=2,
        segmenter_backbone="shallow",
        segmenter_widths=(4,),
        critic_width=4,
        critic_depth=3,
        checkpoint_every=0,
        seed=3,
    )


@pytest.fixture
def tiny_spec() -> SynthSpec:
    return SynthSpec(
        n_categories=3,
        samples_per_category=6,
        target_samples=12,
        eval_samples=4,
        labeled_budget=2,
        image_size=16,
        seed=0,
    )


@pytest.fixture
def tiny_benchmark(tiny_spec):
    return generate_synthetic(tiny_spec)
