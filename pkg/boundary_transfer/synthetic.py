"""
Procedural few-shot benchmark: textured shapes on textured backgrounds with exact masks.

Each category is one shape family. One family is held out as the target category; the others
form the source pool. Shapes are defined by an analytic polar support function so the mask is the
exact rasterization of the drawn shape. Foreground and background get band-limited noise textures
with different frequency bands.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from boundary_transfer.config import check_keys, read_flat_file, write_flat_file
from boundary_transfer.datamodel import Image, LabeledSample, Mask, SourceDataset, TargetDataset
from boundary_transfer.datasets import export_samples, few_shot_split
from boundary_transfer.errors import ConfigError, InvalidValueError

logger = logging.getLogger(__name__)

SPEC_FILE = "synth_spec.txt"
FAMILY_CATALOGUE = ("ellipse", "polygon-5", "star", "annulus", "blob", "polygon-3", "polygon-4")
MAX_ATTEMPTS = 200


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _check_family(name: str) -> str:
    if name in ("ellipse", "star", "annulus", "blob"):
        return name
    if name.startswith("polygon-") and name[8:].isdigit() and int(name[8:]) >= 3:
        return name
    raise ValueError(f"unknown shape family {name!r}")


class SynthSpec(BaseModel):
    """Parameters of the synthetic benchmark.

    ``shape_families`` defaults to the first ``n_categories`` entries of the catalogue; the target
    family defaults to the last listed family.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_categories: int = Field(4, ge=2)
    shape_families: tuple[str, ...] = ()
    target_family: Optional[str] = None
    samples_per_category: int = Field(500, ge=1)
    target_samples: int = Field(610, ge=1)
    eval_samples: int = Field(100, ge=0)
    labeled_budget: int = Field(10, ge=0)
    image_size: int = Field(64, ge=8)
    seed: int = 0
    fg_band: tuple[float, float] = (0.25, 0.6)
    bg_band: tuple[float, float] = (0.02, 0.12)
    contrast: float = Field(0.35, ge=0, le=1)
    min_area: float = Field(0.10, gt=0, lt=1)
    max_area: float = Field(0.60, gt=0, lt=1)

    @field_validator("fg_band", "bg_band", mode="before")
    @classmethod
    def _parse_list(cls, value: Any) -> Any:
        return _split_list(value)

    @model_validator(mode="before")
    @classmethod
    def _fill_families(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        families = tuple(_split_list(data.get("shape_families") or ()))
        if families and data.get("n_categories") in (None, ""):
            data["n_categories"] = len(families)
        if not families:
            families = FAMILY_CATALOGUE[: int(data.get("n_categories", 4))]
        data["shape_families"] = families
        if not data.get("target_family") and families:
            data["target_family"] = families[-1]
        return data

    @model_validator(mode="after")
    def _check(self) -> "SynthSpec":
        families = self.shape_families
        if len(families) != self.n_categories:
            raise ValueError(
                f"n_categories is {self.n_categories} but {len(families)} shape families are given"
            )
        for name in families:
            _check_family(name)
        if len(set(families)) != len(families):
            raise ValueError("shape families must be pairwise distinct")
        if self.target_family not in families:
            raise ValueError(
                f"target family {self.target_family!r} is not one of {', '.join(families)}"
            )
        if self.min_area >= self.max_area:
            raise ValueError("min_area must be below max_area")
        if self.eval_samples + self.labeled_budget > self.target_samples:
            raise ValueError("eval_samples + labeled_budget exceed target_samples")
        for band in (self.fg_band, self.bg_band):
            if not 0 <= band[0] < band[1] <= 1:
                raise ValueError(f"frequency band {band} must satisfy 0 <= low < high <= 1")
        return self

    @property
    def source_families(self) -> tuple[str, ...]:
        return tuple(f for f in self.shape_families if f != self.target_family)


def read_synth_spec(path: Union[Path, str]) -> SynthSpec:
    values = read_flat_file(path)
    check_keys(values.keys(), SynthSpec.model_fields.keys())
    try:
        return SynthSpec.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"invalid synthetic spec {path}: {e}") from e


def write_synth_spec(spec: SynthSpec, path: Union[Path, str]) -> None:
    write_flat_file(spec.model_dump(), path, header="boundary-transfer synthetic benchmark spec")


@dataclass(frozen=True)
class ShapeDraw:
    """One drawn shape: family, centre (row, col) in pixels, radius in pixels, rotation in radians
    and family-specific parameters."""

    family: str
    centre: tuple[float, float]
    radius: float
    angle: float
    params: dict[str, Any] = field(default_factory=dict)


def _polar(draw: ShapeDraw, size: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    dy, dx = rows - draw.centre[0], cols - draw.centre[1]
    c, s = math.cos(draw.angle), math.sin(draw.angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return np.hypot(u, v), np.arctan2(v, u)


def support(draw: ShapeDraw, size: int) -> np.ndarray:
    """Boolean ``size x size`` array: pixel centres inside the shape."""
    r, theta = _polar(draw, size)
    R = draw.radius
    family = draw.family
    if family == "ellipse":
        u = r * np.cos(theta)
        v = r * np.sin(theta)
        return (u / R) ** 2 + (v / (R * draw.params["aspect"])) ** 2 <= 1
    if family.startswith("polygon-"):
        k = int(family[8:])
        sector = 2 * math.pi / k
        local = np.mod(theta, sector) - sector / 2
        return r * np.cos(local) <= R * math.cos(math.pi / k)
    if family == "star":
        k, rho = draw.params["points"], draw.params["inner"]
        return r <= R * (rho + (1 - rho) * (0.5 + 0.5 * np.cos(k * theta)))
    if family == "annulus":
        return (r <= R) & (r >= R * draw.params["inner"])
    if family == "blob":
        boundary = np.ones_like(theta)
        for order, (amp, phase) in enumerate(draw.params["harmonics"], start=2):
            boundary += amp * np.cos(order * theta + phase)
        return r <= R * boundary
    raise InvalidValueError(f"unknown shape family {family!r}")


def _draw_shape(family: str, size: int, rng: np.random.Generator) -> ShapeDraw:
    params: dict[str, Any] = {}
    if family == "ellipse":
        params["aspect"] = float(rng.uniform(0.45, 0.9))
    elif family == "star":
        params["points"] = int(rng.integers(5, 8))
        params["inner"] = float(rng.uniform(0.4, 0.6))
    elif family == "annulus":
        params["inner"] = float(rng.uniform(0.35, 0.55))
    elif family == "blob":
        params["harmonics"] = [
            (float(rng.uniform(0.0, 0.15)), float(rng.uniform(0, 2 * math.pi))) for _ in range(3)
        ]
    radius = float(rng.uniform(0.22, 0.45) * size)
    margin = 0.5 * radius
    centre = (
        float(rng.uniform(margin, size - margin)),
        float(rng.uniform(margin, size - margin)),
    )
    return ShapeDraw(family, centre, radius, float(rng.uniform(0, 2 * math.pi)), params)


def band_noise(rng: np.random.Generator, size: int, band: tuple[float, float]) -> np.ndarray:
    """Zero-mean unit-variance noise keeping only frequencies in ``band`` (fractions of Nyquist)."""
    white = rng.standard_normal((size, size))
    freq = np.fft.fftfreq(size)
    radius = np.hypot(*np.meshgrid(freq, freq, indexing="ij")) / 0.5
    keep = (radius >= band[0]) & (radius <= band[1])
    noise = np.fft.ifft2(np.fft.fft2(white) * keep).real
    noise -= noise.mean()
    std = noise.std()
    return noise / std if std > 0 else noise


def _texture(rng: np.random.Generator, size: int, band: tuple[float, float], contrast: float):
    base = rng.uniform(0.2, 0.8, size=3)
    gains = rng.uniform(0.5, 1.0, size=3)
    noise = band_noise(rng, size, band)
    return np.clip(base + 0.25 * contrast * gains * noise[:, :, None], 0.0, 1.0)


def render_sample(
    spec: SynthSpec, family: str, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, ShapeDraw]:
    """Draw one shape whose area lies within ``spec.min_area``..``spec.max_area`` and render it.

    Returns:
        ``uint8`` image ``(H, W, 3)``, boolean mask ``(H, W)`` and the drawn shape
    """
    size = spec.image_size
    for _ in range(MAX_ATTEMPTS):
        draw = _draw_shape(family, size, rng)
        mask = support(draw, size)
        if spec.min_area <= mask.mean() <= spec.max_area:
            break
    else:
        raise InvalidValueError(
            f"could not draw a {family} covering {spec.min_area:.0%}-{spec.max_area:.0%} "
            f"of a {size}x{size} frame"
        )
    fg = _texture(rng, size, tuple(spec.fg_band), spec.contrast)
    bg = _texture(rng, size, tuple(spec.bg_band), spec.contrast)
    image = np.where(mask[:, :, None], fg, bg)
    return np.rint(image * 255).astype(np.uint8), mask, draw


def _sample_rng(spec: SynthSpec, family: str, index: int) -> np.random.Generator:
    family_index = spec.shape_families.index(family)
    return np.random.default_rng(np.random.SeedSequence([spec.seed, family_index, index]))


def _sample(spec: SynthSpec, family: str, index: int) -> LabeledSample:
    image, mask, _ = render_sample(spec, family, _sample_rng(spec, family, index))
    return LabeledSample(
        image=Image.from_array(image.astype(np.float32) / 255.0),
        mask=Mask.from_array(mask.astype(np.float32), hard=True),
        stem=f"{family}_{index:05d}",
        category=family,
    )


def synthetic_samples(spec: SynthSpec) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Source samples of every source family, then target samples of the held-out family."""
    source = [
        _sample(spec, family, i)
        for family in spec.source_families
        for i in range(spec.samples_per_category)
    ]
    target = [_sample(spec, spec.target_family, i) for i in range(spec.target_samples)]
    return source, target


def generate_synthetic(spec: SynthSpec) -> tuple[SourceDataset, TargetDataset]:
    """Build the benchmark in memory. The last ``eval_samples`` target samples form the
    evaluation split."""
    source_samples, target_samples = synthetic_samples(spec)
    n_train = spec.target_samples - spec.eval_samples
    source = SourceDataset(
        samples=tuple(source_samples), category_vocabulary=frozenset(spec.source_families)
    )
    target = few_shot_split(
        target_samples[:n_train],
        spec.labeled_budget,
        spec.seed,
        evaluation=target_samples[n_train:],
    )
    logger.info(
        f"Synthetic benchmark: source {len(source)} samples of {', '.join(spec.source_families)}; "
        f"target {spec.target_family}: {len(target.labeled)} labeled, "
        f"{len(target.unlabeled)} unlabeled, {len(target.evaluation_samples())} evaluation"
    )
    return source, target


def write_synthetic(spec: SynthSpec, out_dir: Union[Path, str]) -> dict[str, int]:
    """Write ``source/`` and ``target/`` dataset trees plus the ``SynthSpec`` file in ``out_dir``.

    Returns:
        Sample count per family
    """
    out_dir = Path(out_dir)
    source_samples, target_samples = synthetic_samples(spec)
    n_train = spec.target_samples - spec.eval_samples
    export_samples(source_samples, out_dir / "source")
    export_samples(
        target_samples,
        out_dir / "target",
        splits=["train"] * n_train + ["eval"] * spec.eval_samples,
    )
    write_synth_spec(spec, out_dir / SPEC_FILE)
    counts = {family: spec.samples_per_category for family in spec.source_families}
    counts[spec.target_family] = spec.target_samples
    return counts
