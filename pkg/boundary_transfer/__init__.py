"""Few-shot foreground segmentation by adversarial transfer of boundary knowledge."""

from boundary_transfer.config import TrainingConfig
from boundary_transfer.datamodel import (
    Image,
    LabeledSample,
    Mask,
    SourceDataset,
    TargetDataset,
    Triplet,
)

__version__ = "0.1.0"

__all__ = [
    "Image",
    "LabeledSample",
    "Mask",
    "SourceDataset",
    "TargetDataset",
    "TrainingConfig",
    "Triplet",
]
