"""
Binary segmentation scores from a 2 x 2 confusion matrix.

``counts[g, p]`` is the number of pixels with ground-truth class ``g`` predicted as ``p``
(0 = background, 1 = foreground). Classes with no ground-truth pixels are left out of the MPA and
MIoU averages.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from boundary_transfer.datamodel import Image, LabeledSample, Mask, binarize
from boundary_transfer.errors import InvalidValueError, ShapeMismatchError, SoftMaskError
from boundary_transfer.networks import SegmentationNetwork, predict

logger = logging.getLogger(__name__)

N_CLASSES = 2
SCORE_FIELDS = ("pa", "mpa", "miou", "fwiou", "pixels")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @classmethod
    def from_arrays(cls, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        """Counts for integer class arrays of identical shape."""
        index = N_CLASSES * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
        counts = np.bincount(index, minlength=N_CLASSES**2).reshape(N_CLASSES, N_CLASSES)
        return cls(counts.astype(np.int64))


class Scores(BaseModel):
    model_config = ConfigDict(frozen=True)

    pa: float
    mpa: float
    miou: float
    fwiou: float
    pixels: int

    def percentages(self) -> dict:
        """The four scores in percent with two decimals, plus the pixel count."""
        values = {name: round(100 * getattr(self, name), 2) for name in SCORE_FIELDS[:-1]}
        values["pixels"] = self.pixels
        return values


def accumulate(
    cm: ConfusionMatrix, pred: Mask, gt: Mask, threshold: float = 0.5
) -> ConfusionMatrix:
    """Add the pixels of ``pred`` (binarized at ``threshold``) against ``gt``."""
    if not gt.hard:
        raise SoftMaskError("ground truth for scoring must be a hard mask")
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p = binarize(pred, threshold).data.cpu().numpy()
    g = gt.data.detach().cpu().numpy()
    return cm + ConfusionMatrix.from_arrays(p, g)


def scores(cm: ConfusionMatrix) -> Scores:
    total = cm.total
    if total == 0:
        raise InvalidValueError("cannot score an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    gt_total = counts.sum(axis=1)
    pred_total = counts.sum(axis=0)
    present = gt_total > 0

    recall = tp[present] / gt_total[present]
    iou = tp[present] / (gt_total[present] + pred_total[present] - tp[present])
    frequency = gt_total[present] / total
    return Scores(
        pa=float(tp.sum() / total),
        mpa=float(recall.mean()),
        miou=float(iou.mean()),
        fwiou=float((frequency * iou).sum()),
        pixels=total,
    )


def evaluate_masks(preds: Iterable[Mask], gts: Iterable[Mask], threshold: float = 0.5) -> Scores:
    cm = ConfusionMatrix()
    for pred, gt in zip(preds, gts):
        cm = accumulate(cm, pred, gt, threshold)
    return scores(cm)


def evaluate(
    net: SegmentationNetwork,
    samples: Sequence[LabeledSample],
    threshold: float = 0.5,
    batch_size: int = 16,
    device: str = "cpu",
) -> Scores:
    """Score ``net`` in inference mode over labeled samples."""
    if not samples:
        raise InvalidValueError("no samples to evaluate")
    cm = ConfusionMatrix()
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = Image.stack([s.image for s in chunk])
        pred = predict(net, Image(images.data.to(device)))
        gt = Mask.stack([s.mask for s in chunk])
        cm = accumulate(cm, Mask(pred.data.cpu()), gt, threshold)
    result = scores(cm)
    logger.debug(f"Evaluated {len(samples)} samples: miou={result.miou:.4f} pa={result.pa:.4f}")
    return result
