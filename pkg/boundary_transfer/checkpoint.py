"""
Checkpoint container.

A checkpoint is a ``torch.save`` dictionary::

    format        "boundary-transfer-checkpoint"
    version       "MAJOR.MINOR"; readers accept any minor version of their major
    architecture  {"segmenter": SegmenterSpec fields, "critics": {side: CriticSpec fields}}
    segmenter     state dict of the segmentation network
    critics       {side: state dict}
    optimizers    {"segmenter" | side: optimizer state dict}
    step          outer training steps completed
    config        TrainingConfig fields (JSON types)
    rng_state     numpy bit-generator state, JSON-encoded
    extra         trainer bookkeeping (early-stopping counters, best score)

Files are written to a temporary sibling and renamed, so an interrupted save never leaves a
truncated checkpoint behind.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import torch
import torch.nn as nn

from boundary_transfer.config import TrainingConfig, validate_config
from boundary_transfer.errors import CheckpointError
from boundary_transfer.networks import (
    BoundaryCritic,
    CriticSpec,
    SegmentationNetwork,
    SegmenterSpec,
)

logger = logging.getLogger(__name__)

FORMAT = "boundary-transfer-checkpoint"
VERSION = "1.0"


@dataclass
class Checkpoint:
    step: int
    config: TrainingConfig
    segmenter_spec: SegmenterSpec
    critic_specs: dict[str, CriticSpec]
    segmenter_state: dict[str, torch.Tensor]
    critic_states: dict[str, dict[str, torch.Tensor]]
    optimizer_states: dict[str, dict] = field(default_factory=dict)
    rng_state: Optional[dict] = None
    extra: dict[str, Any] = field(default_factory=dict)
    version: str = VERSION

    def build_segmenter(self) -> SegmentationNetwork:
        net = SegmentationNetwork(self.segmenter_spec)
        net.load_state_dict(self.segmenter_state)
        return net

    def build_critic(self, side: str) -> BoundaryCritic:
        if side not in self.critic_specs:
            raise CheckpointError(f"checkpoint holds no {side} critic")
        critic = BoundaryCritic(self.critic_specs[side])
        critic.load_state_dict(self.critic_states[side])
        return critic


def _state(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}


def to_payload(checkpoint: Checkpoint) -> dict[str, Any]:
    return {
        "format": FORMAT,
        "version": checkpoint.version,
        "architecture": {
            "segmenter": {
                **checkpoint.segmenter_spec.__dict__,
                "widths": list(checkpoint.segmenter_spec.widths),
            },
            "critics": {
                side: dict(spec.__dict__) for side, spec in checkpoint.critic_specs.items()
            },
        },
        "segmenter": checkpoint.segmenter_state,
        "critics": checkpoint.critic_states,
        "optimizers": checkpoint.optimizer_states,
        "step": checkpoint.step,
        "config": checkpoint.config.model_dump(mode="json"),
        "rng_state": json.dumps(checkpoint.rng_state) if checkpoint.rng_state is not None else "",
        "extra": json.dumps(checkpoint.extra),
    }


def capture(
    step: int,
    config: TrainingConfig,
    segmenter: SegmentationNetwork,
    critics: dict[str, BoundaryCritic],
    optimizers: Optional[dict[str, torch.optim.Optimizer]] = None,
    rng_state: Optional[dict] = None,
    extra: Optional[dict[str, Any]] = None,
) -> Checkpoint:
    """Snapshot live networks and optimizers into a ``Checkpoint``."""
    return Checkpoint(
        step=step,
        config=config,
        segmenter_spec=segmenter.spec,
        critic_specs={side: critic.spec for side, critic in critics.items()},
        segmenter_state=_state(segmenter),
        critic_states={side: _state(critic) for side, critic in critics.items()},
        optimizer_states={name: opt.state_dict() for name, opt in (optimizers or {}).items()},
        rng_state=rng_state,
        extra=dict(extra or {}),
    )


def save_checkpoint(checkpoint: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(to_payload(checkpoint), tmp)
    os.replace(tmp, path)
    logger.info(f"Checkpoint at step {checkpoint.step} written to {path}")
    return path


def _check_version(version: Any) -> str:
    major = str(version).split(".", 1)[0]
    if major != VERSION.split(".", 1)[0]:
        raise CheckpointError(f"checkpoint version {version} is not readable by {VERSION}")
    return str(version)


def load_checkpoint(path: Path | str, map_location: str = "cpu") -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint {path} does not exist") from e
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a boundary-transfer checkpoint")
    try:
        architecture = payload["architecture"]
        rng_state = payload["rng_state"]
        return Checkpoint(
            version=_check_version(payload["version"]),
            step=int(payload["step"]),
            config=validate_config(payload["config"]),
            segmenter_spec=SegmenterSpec.from_dict(architecture["segmenter"]),
            critic_specs={
                side: CriticSpec.from_dict(spec) for side, spec in architecture["critics"].items()
            },
            segmenter_state=payload["segmenter"],
            critic_states=payload["critics"],
            optimizer_states=payload.get("optimizers", {}),
            rng_state=json.loads(rng_state) if rng_state else None,
            extra=json.loads(payload.get("extra") or "{}"),
        )
    except KeyError as e:
        raise CheckpointError(f"checkpoint {path} lacks field {e}") from e
