"""
Dataset ingestion, category exclusion and few-shot splitting.

On disk a dataset is::

    <root>/images/<stem>.png     8-bit RGB (or grayscale)
    <root>/masks/<stem>.png      8-bit grayscale, >= 128 is foreground
    <root>/manifest.tsv          optional; columns stem, category and optionally split

Without a manifest every image under ``images/`` is an entry with no category. Entries without a
``split`` column are assigned to the evaluation split by a seed-stable hash of the stem.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from PIL import Image as PILImage

from boundary_transfer.datamodel import Image, LabeledSample, Mask, SourceDataset, TargetDataset
from boundary_transfer.errors import CategoryError, DatasetError, DatasetLoadError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
IMAGE_DIR = "images"
MASK_DIR = "masks"
EVAL_FRACTION = 0.2
SUSPECT_LOW = 0.005
SUSPECT_HIGH = 0.995
SPLITS = ("train", "eval")


@dataclass(frozen=True)
class ManifestEntry:
    stem: str
    category: Optional[str] = None
    split: str = "train"


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "entries", tuple(self.entries))
        stems = [e.stem for e in self.entries]
        duplicates = sorted({s for s in stems if stems.count(s) > 1})
        if duplicates:
            raise DatasetError(f"duplicate stems in {self.root}: {', '.join(duplicates[:5])}")
        bad = [e.stem for e in self.entries if e.split not in SPLITS]
        if bad:
            raise DatasetError(f"unknown split for stems {', '.join(bad[:5])}")

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, stem: str) -> Path:
        return self.root / IMAGE_DIR / f"{stem}.png"

    def mask_path(self, stem: str) -> Path:
        return self.root / MASK_DIR / f"{stem}.png"

    @property
    def categories(self) -> frozenset[str]:
        return frozenset(e.category for e in self.entries if e.category)

    def split(self, name: str) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.split == name)


def stem_in_eval_split(stem: str, seed: int, fraction: float = EVAL_FRACTION) -> bool:
    digest = hashlib.sha256(f"{seed}:{stem}".encode()).hexdigest()
    return int(digest[:8], 16) / 2**32 < fraction


def read_manifest(
    root: Union[Path, str], seed: int = 0, eval_fraction: float = EVAL_FRACTION
) -> DatasetManifest:
    root = Path(root)
    manifest_file = root / MANIFEST_NAME
    if manifest_file.exists():
        table = pd.read_csv(
            manifest_file, sep="\t", header=None, dtype=str, keep_default_na=False, comment="#"
        )
        if len(table) and table.iloc[0, 0] == "stem":
            table = table.iloc[1:]
        if table.shape[1] < 1 or table.shape[1] > 3:
            raise DatasetError(f"{manifest_file}: expected 1 to 3 tab-separated columns")
        table = table.reindex(columns=range(3), fill_value="")
        rows = [tuple(str(v).strip() for v in row) for row in table.itertuples(index=False)]
    elif (root / IMAGE_DIR).is_dir():
        rows = [(p.stem, "", "") for p in sorted((root / IMAGE_DIR).glob("*.png"))]
    else:
        raise DatasetError(f"{root} has neither {MANIFEST_NAME} nor an {IMAGE_DIR}/ directory")

    entries = []
    for stem, category, split in rows:
        if not split:
            split = "eval" if stem_in_eval_split(stem, seed, eval_fraction) else "train"
        entries.append(ManifestEntry(stem=stem, category=category or None, split=split))
    manifest = DatasetManifest(root=root, entries=tuple(entries))
    logger.info(
        f"Manifest {root}: {len(manifest)} entries, {len(manifest.split('eval'))} in eval split"
    )
    return manifest


def write_manifest(entries: Iterable[ManifestEntry], root: Union[Path, str]) -> Path:
    table = pd.DataFrame(
        [(e.stem, e.category or "", e.split) for e in entries],
        columns=["stem", "category", "split"],
    )
    path = Path(root) / MANIFEST_NAME
    table.to_csv(path, sep="\t", index=False)
    return path


def _read_png(path: Path, mode: str) -> PILImage.Image:
    with PILImage.open(path) as img:
        img.load()
        if img.width == 0 or img.height == 0:
            raise DatasetError(f"{path} is empty")
        return img.convert(mode)


def load_image(path: Path, image_size: int, channels: int = 3) -> Image:
    img = _read_png(path, "RGB" if channels == 3 else "L")
    if img.size != (image_size, image_size):
        img = img.resize((image_size, image_size), PILImage.Resampling.BILINEAR)
    return Image.from_array(np.asarray(img, dtype=np.float32) / 255.0)


def load_mask(path: Path, image_size: int) -> Mask:
    """Threshold at 128; when resizing, interpolate the 0/1 mask bilinearly and re-binarize."""
    img = _read_png(path, "L")
    hard = (np.asarray(img) >= 128).astype(np.float32)
    if img.size != (image_size, image_size):
        resized = PILImage.fromarray(hard).resize(
            (image_size, image_size), PILImage.Resampling.BILINEAR
        )
        hard = (np.asarray(resized) >= 0.5).astype(np.float32)
    return Mask.from_array(hard, hard=True)


def _is_suspect(mask: Mask) -> bool:
    fraction = mask.foreground_fraction()
    return fraction < SUSPECT_LOW or fraction > SUSPECT_HIGH


def _load_entries(
    manifest: DatasetManifest,
    entries: Sequence[ManifestEntry],
    image_size: int,
    channels: int,
    mask_required: bool,
) -> tuple[list[Union[LabeledSample, tuple[ManifestEntry, Image]]], list[str], list[str]]:
    loaded: list = []
    errors: list[str] = []
    suspects: list[str] = []
    for entry in entries:
        image_path, mask_path = manifest.image_path(entry.stem), manifest.mask_path(entry.stem)
        try:
            if not image_path.exists():
                raise DatasetError(f"missing image {image_path}")
            image = load_image(image_path, image_size, channels)
            if not mask_path.exists():
                if mask_required:
                    raise DatasetError(f"missing mask {mask_path}")
                loaded.append((entry, image))
                continue
            mask = load_mask(mask_path, image_size)
        except (OSError, ValueError) as e:
            errors.append(f"{entry.stem}: {e}")
            continue
        if _is_suspect(mask):
            logger.warning(
                f"Suspect mask {entry.stem}: foreground fraction {mask.foreground_fraction():.4f}"
            )
            suspects.append(entry.stem)
        loaded.append(LabeledSample(image, mask, stem=entry.stem, category=entry.category))
    return loaded, errors, suspects


def load_source(manifest: DatasetManifest, image_size: int, channels: int = 3) -> SourceDataset:
    """Every entry, regardless of split, must have a mask."""
    samples, errors, suspects = _load_entries(
        manifest, manifest.entries, image_size, channels, mask_required=True
    )
    if errors:
        for message in errors:
            logger.error(message)
        raise DatasetLoadError(errors)
    logger.info(f"Loaded source dataset {manifest.root}: {len(samples)} samples")
    return SourceDataset(
        samples=tuple(samples),
        category_vocabulary=manifest.categories,
        suspect_stems=tuple(suspects),
    )


def load_target(
    manifest: DatasetManifest,
    image_size: int,
    budget: int,
    seed: int = 0,
    channels: int = 3,
) -> TargetDataset:
    """Train-split entries with masks form the few-shot pool, entries without masks go straight to
    the unlabeled pool, and eval-split entries are held out for scoring."""
    train, train_errors, suspects = _load_entries(
        manifest, manifest.split("train"), image_size, channels, mask_required=False
    )
    evaluation, eval_errors, eval_suspects = _load_entries(
        manifest, manifest.split("eval"), image_size, channels, mask_required=False
    )
    errors = train_errors + eval_errors
    if errors:
        for message in errors:
            logger.error(message)
        raise DatasetLoadError(errors)

    pool = [item for item in train if isinstance(item, LabeledSample)]
    maskless = [
        (entry.category, image) for entry, image in (t for t in train if isinstance(t, tuple))
    ]
    held_out = [item for item in evaluation if isinstance(item, LabeledSample)]
    if len(held_out) < len(evaluation):
        logger.warning(
            f"{len(evaluation) - len(held_out)} eval-split entries have no mask and are ignored"
        )
    target = few_shot_split(
        pool,
        budget,
        seed,
        extra_unlabeled=maskless,
        evaluation=held_out,
        suspect_stems=tuple(suspects + eval_suspects),
    )
    logger.info(
        f"Loaded target dataset {manifest.root}: {len(target.labeled)} labeled, "
        f"{len(target.unlabeled)} unlabeled, {len(held_out)} evaluation"
    )
    return target


def load_dataset(
    manifest: DatasetManifest,
    kind: Literal["source", "target"],
    image_size: int,
    budget: int = 0,
    seed: int = 0,
    channels: int = 3,
) -> Union[SourceDataset, TargetDataset]:
    if kind == "source":
        return load_source(manifest, image_size, channels)
    if kind == "target":
        return load_target(manifest, image_size, budget, seed, channels)
    raise DatasetError(f"unknown dataset kind {kind!r}")


def load_labeled(
    manifest: DatasetManifest, image_size: int, channels: int = 3
) -> list[LabeledSample]:
    """All masked entries of a manifest, for evaluation."""
    samples, errors, _ = _load_entries(
        manifest, manifest.entries, image_size, channels, mask_required=False
    )
    if errors:
        raise DatasetLoadError(errors)
    return [s for s in samples if isinstance(s, LabeledSample)]


def few_shot_split(
    pool: Sequence[LabeledSample],
    budget: int,
    seed: int,
    extra_unlabeled: Sequence[tuple[Optional[str], Image]] = (),
    evaluation: Sequence[LabeledSample] = (),
    suspect_stems: Sequence[str] = (),
) -> TargetDataset:
    """Pick ``budget`` labeled samples from ``pool``; the rest lose their masks for training.

    The selection depends only on ``seed`` and the pool order.
    """
    if not 0 <= budget <= len(pool):
        raise DatasetError(f"labeled budget {budget} exceeds the labeled pool of {len(pool)}")
    order = np.random.default_rng(seed).permutation(len(pool))
    chosen = set(order[:budget].tolist())
    labeled = [s for i, s in enumerate(pool) if i in chosen]
    withheld = [s for i, s in enumerate(pool) if i not in chosen]
    unlabeled = [s.image for s in withheld] + [image for _, image in extra_unlabeled]
    labels = (
        [s.category for s in labeled]
        + [s.category for s in withheld]
        + [category for category, _ in extra_unlabeled]
    )
    return TargetDataset(
        labeled=tuple(labeled),
        unlabeled=tuple(unlabeled),
        category_labels=tuple(labels),
        budget=budget,
        suspect_stems=tuple(suspect_stems),
        _evaluation=tuple(evaluation),
        _withheld=tuple(withheld),
    )


def exclude_categories(source: SourceDataset, categories: Iterable[str]) -> SourceDataset:
    """Drop every sample of the named categories from a mixed source pool."""
    categories = frozenset(categories)
    if not source.category_vocabulary:
        raise CategoryError("source dataset carries no category metadata")
    unknown = sorted(categories - source.category_vocabulary)
    if unknown:
        raise CategoryError(
            f"unknown source categories {', '.join(unknown)}; "
            f"known: {', '.join(sorted(source.category_vocabulary))}"
        )
    keep = [i for i, label in enumerate(source.category_labels) if label not in categories]
    result = SourceDataset(
        samples=tuple(source.samples[i] for i in keep),
        category_labels=tuple(source.category_labels[i] for i in keep),
        category_vocabulary=source.category_vocabulary - categories,
        suspect_stems=source.suspect_stems,
    )
    logger.info(
        f"Excluded {', '.join(sorted(categories))}: source {len(source)} -> {len(result)} samples"
    )
    return result


def exclude_category(source: SourceDataset, category: str) -> SourceDataset:
    return exclude_categories(source, [category])


def check_disjoint(source: SourceDataset, target: TargetDataset) -> None:
    """Source and target categories must not overlap when both datasets name them."""
    if not source.category_vocabulary or not target.categories:
        return
    overlap = source.category_vocabulary & target.categories
    if overlap:
        raise CategoryError(
            f"source and target share categories {', '.join(sorted(overlap))}; "
            f"exclude them from the source first"
        )


def _to_png_array(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)


def save_image(image: Image, path: Path) -> None:
    array = _to_png_array(image.to_array())
    PILImage.fromarray(array[:, :, 0] if array.shape[2] == 1 else array).save(path)


def save_mask(mask: Mask, path: Path) -> None:
    PILImage.fromarray(_to_png_array(mask.to_array())).save(path)


def export_samples(
    samples: Sequence[LabeledSample],
    root: Union[Path, str],
    splits: Optional[Sequence[str]] = None,
) -> DatasetManifest:
    """Write samples in the on-disk layout; loading the result gives back identical tensors."""
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    (root / MASK_DIR).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        stem = sample.stem or f"sample_{i:05d}"
        save_image(sample.image, root / IMAGE_DIR / f"{stem}.png")
        save_mask(sample.mask, root / MASK_DIR / f"{stem}.png")
        split = splits[i] if splits is not None else "train"
        entries.append(ManifestEntry(stem=stem, category=sample.category, split=split))
    write_manifest(entries, root)
    return DatasetManifest(root=root, entries=tuple(entries))


def resplit(target: TargetDataset, budget: int, seed: int) -> TargetDataset:
    """Redraw the few-shot subset of ``target`` with another budget, keeping its evaluation split
    and its mask-less images."""
    pool = sorted(
        target.labeled + target.withheld_samples(), key=lambda s: (s.stem or "", s.category or "")
    )
    n_masked = len(target.labeled) + len(target.withheld_samples())
    extra_images = target.unlabeled[len(target.withheld_samples()) :]
    extra_labels = target.category_labels[n_masked:]
    return few_shot_split(
        pool,
        budget,
        seed,
        extra_unlabeled=list(zip(extra_labels, extra_images)),
        evaluation=target.evaluation_samples(),
        suspect_stems=target.suspect_stems,
    )
