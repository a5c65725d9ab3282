"""
Configuration: the training hyperparameters, flat ``key = value`` config files, environment
settings and logging setup.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from boundary_transfer.errors import ConfigError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

AblationFlag = Literal["no_self_sup", "no_pseudo", "no_inner", "no_outer", "single_discriminator"]
ABLATION_FLAGS: tuple[str, ...] = (
    "no_self_sup",
    "no_pseudo",
    "no_inner",
    "no_outer",
    "single_discriminator",
)


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def default_radius_range(image_size: int) -> tuple[int, int]:
    """Disk radius range scaled to the raster size (about 4% to 21% of the side)."""
    return max(1, round(0.04 * image_size)), max(1, round(0.21 * image_size))


class TrainingConfig(BaseModel):
    """Every scalar hyperparameter of the alternating training loop."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_gp: float = Field(10.0, ge=0)
    n_critic: int = Field(5, ge=1)
    batch_size: int = Field(64, ge=1)
    adam_alpha: float = Field(1e-4, gt=0)
    adam_beta1: float = Field(0.0, ge=0, lt=1)
    adam_beta2: float = Field(0.9, ge=0, lt=1)
    tau: float = 1.0
    eta: float = 1.0
    # listed with the other hyperparameters, consumed nowhere
    laplace_xi: float = 1.0
    radius_min: int = Field(None, ge=1)  # type: ignore[assignment]
    radius_max: int = Field(None, ge=1)  # type: ignore[assignment]
    image_size: int = Field(128, ge=8)
    seed: int = 0
    ablation: frozenset[AblationFlag] = frozenset()
    labeled_budget: int = Field(10, ge=0)

    max_steps: int = Field(2000, ge=0)
    checkpoint_every: int = Field(500, ge=0)
    eval_every: int = Field(0, ge=0)
    early_stop_patience: int = Field(10, ge=0)
    inner_pseudo_mode: Literal["dilate", "erode"] = "dilate"
    augment_labeled: bool = True
    source_pretrain_steps: int = Field(0, ge=0)
    rotation_max_deg: float = Field(30.0, ge=0, le=180)
    scale_min: float = Field(0.8, gt=0)
    scale_max: float = Field(1.25, gt=0)
    shift_max: float = Field(0.1, ge=0, le=1)
    flip_prob: float = Field(0.5, ge=0, le=1)
    segmenter_backbone: str = "unet"
    segmenter_widths: tuple[int, ...] = (16, 32, 64, 128)
    critic_width: int = Field(32, ge=1)
    critic_depth: int = Field(5, ge=1)
    eval_threshold: float = Field(0.5, gt=0, lt=1)

    @model_validator(mode="before")
    @classmethod
    def _fill_radius_range(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        if data.get("radius_min") in (None, "") or data.get("radius_max") in (None, ""):
            low, high = default_radius_range(int(data.get("image_size", 128)))
            if data.get("radius_min") in (None, ""):
                data["radius_min"] = low
            if data.get("radius_max") in (None, ""):
                data["radius_max"] = high
        return data

    @field_validator("ablation", mode="before")
    @classmethod
    def _parse_ablation(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("segmenter_widths", mode="before")
    @classmethod
    def _parse_widths(cls, value: Any) -> Any:
        return _split_list(value)

    @model_validator(mode="after")
    def _check_invariants(self) -> "TrainingConfig":
        if not 1 <= self.radius_min <= self.radius_max < self.image_size / 2:
            raise ValueError(
                f"need 1 <= radius_min <= radius_max < image_size/2, got "
                f"{self.radius_min}, {self.radius_max}, image_size={self.image_size}"
            )
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must not exceed scale_max")
        if not self.segmenter_widths or min(self.segmenter_widths) < 1:
            raise ValueError("segmenter_widths must be a non-empty list of positive integers")
        if "single_discriminator" in self.ablation and self.ablation & {"no_inner", "no_outer"}:
            raise ValueError("single_discriminator cannot be combined with no_inner / no_outer")
        return self

    @property
    def uses_outer(self) -> bool:
        return "no_outer" not in self.ablation and "single_discriminator" not in self.ablation

    @property
    def uses_inner(self) -> bool:
        return "no_inner" not in self.ablation and "single_discriminator" not in self.ablation

    @property
    def uses_joint(self) -> bool:
        return "single_discriminator" in self.ablation

    @property
    def adversarial(self) -> bool:
        return self.uses_outer or self.uses_inner or self.uses_joint

    def with_overrides(self, **overrides: Any) -> "TrainingConfig":
        """Return a validated copy; ``None`` overrides are ignored.

        Changing ``image_size`` without giving a radius recomputes the default radius range.
        """
        overrides = {k: v for k, v in overrides.items() if v is not None}
        values = self.model_dump()
        if "image_size" in overrides and overrides["image_size"] != self.image_size:
            for key in ("radius_min", "radius_max"):
                if key not in overrides:
                    values[key] = None
        values.update(overrides)
        return validate_config(values)


def validate_config(values: dict[str, Any]) -> TrainingConfig:
    try:
        return TrainingConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"invalid training config: {e}") from e


def read_flat_file(path: Path | str) -> dict[str, str]:
    """Parse a ``key = value`` text file. Blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{number}: duplicate key {key!r}")
        values[key] = value
    return values


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (tuple, list, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return ",".join(str(item) for item in items)
    return str(value)


def write_flat_file(values: dict[str, Any], path: Path | str, header: Optional[str] = None) -> None:
    lines = [f"# {header}"] if header else []
    lines += [f"{key} = {_format_value(value)}" for key, value in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def check_keys(found: Iterable[str], allowed: Iterable[str], required: Iterable[str] = ()) -> None:
    found, allowed = set(found), set(allowed)
    unknown = sorted(found - allowed)
    missing = sorted(set(required) - found)
    problems = []
    if unknown:
        problems.append(f"unknown keys: {', '.join(unknown)}")
    if missing:
        problems.append(f"missing keys: {', '.join(missing)}")
    if problems:
        raise ConfigError("; ".join(problems))


def load_config(path: Path | str) -> TrainingConfig:
    """Load a config file that names every ``TrainingConfig`` field exactly once."""
    values = read_flat_file(path)
    fields = TrainingConfig.model_fields.keys()
    check_keys(values.keys(), fields, required=fields)
    return validate_config(values)


def save_config(config: TrainingConfig, path: Path | str) -> None:
    write_flat_file(config.model_dump(), path, header="boundary-transfer training config")


@dataclass(frozen=True)
class RuntimeSettings:
    """Process-level settings read from the environment (and a ``.env`` file if present)."""

    device: str = "cpu"
    log_level: str = "INFO"
    num_threads: Optional[int] = None

    @classmethod
    def from_env(cls) -> "RuntimeSettings":
        load_dotenv()
        threads = os.getenv("BOUNDARY_NUM_THREADS")
        return cls(
            device=os.getenv("BOUNDARY_DEVICE", "cpu"),
            log_level=os.getenv("BOUNDARY_LOG_LEVEL", "INFO").upper(),
            num_threads=int(threads) if threads else None,
        )


def setup_logging(log_file: Optional[Path | str] = None, level: str = "INFO") -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
