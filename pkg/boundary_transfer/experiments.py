"""
Ablation runs: train named training variants with a shared seed and compare their evaluation
scores on the same target split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel

from boundary_transfer.config import TrainingConfig
from boundary_transfer.datamodel import SourceDataset, TargetDataset
from boundary_transfer.datasets import resplit
from boundary_transfer.errors import ConfigError, DatasetError
from boundary_transfer.metrics import Scores
from boundary_transfer.trainer import Trainer, TrainingLog

logger = logging.getLogger(__name__)

ALL = "all"


@dataclass(frozen=True)
class Variant:
    name: str
    ablation: frozenset[str] = frozenset()
    overrides: dict[str, Any] = field(default_factory=dict)
    budget: Optional[Union[int, str]] = None


VARIANTS: dict[str, Variant] = {
    v.name: v
    for v in (
        Variant("full"),
        Variant("no_self_sup", frozenset({"no_self_sup"})),
        Variant("no_pseudo", frozenset({"no_pseudo"})),
        Variant("no_inner", frozenset({"no_inner"})),
        Variant("no_outer", frozenset({"no_outer"})),
        Variant("single_discriminator", frozenset({"single_discriminator"})),
        Variant("no_adversarial", frozenset({"no_outer", "no_inner"})),
        Variant(
            "finetune",
            frozenset({"no_outer", "no_inner", "no_self_sup"}),
            overrides={"source_pretrain_steps": None},
        ),
    )
}


def budget_variant(budget: Union[int, str]) -> Variant:
    return Variant(f"budget_{budget}", budget=budget)


class VariantResult(BaseModel):
    name: str
    budget: int
    ablation: list[str]
    steps: int
    scores: Scores

    def row(self) -> dict:
        return {
            "variant": self.name,
            "budget": self.budget,
            "ablation": ",".join(self.ablation) or "-",
            "steps": self.steps,
            **self.scores.percentages(),
        }


def variant_config(variant: Variant, base: TrainingConfig, budget: int) -> TrainingConfig:
    overrides = dict(variant.overrides)
    if "source_pretrain_steps" in overrides and overrides["source_pretrain_steps"] is None:
        overrides["source_pretrain_steps"] = base.max_steps
    return base.with_overrides(
        ablation=",".join(sorted(base.ablation | variant.ablation)),
        labeled_budget=budget,
        **overrides,
    )


def _budget(variant: Variant, base: TrainingConfig, target: TargetDataset) -> int:
    pool = len(target.labeled) + len(target.withheld_samples())
    if variant.budget is None:
        return base.labeled_budget
    if variant.budget == ALL:
        return pool
    return int(variant.budget)


def run_variant(
    variant: Variant,
    source: SourceDataset,
    target: TargetDataset,
    base: TrainingConfig,
    device: str = "cpu",
    out_dir: Optional[Path] = None,
) -> VariantResult:
    budget = _budget(variant, base, target)
    config = variant_config(variant, base, budget)
    split = target if budget == len(target.labeled) else resplit(target, budget, config.seed)
    if not split.evaluation_samples():
        raise DatasetError("ablation runs need a target evaluation split")
    run_dir = out_dir / variant.name if out_dir is not None else None
    trainer = Trainer(source, split, config, device=device, checkpoint_dir=run_dir)
    callbacks = [TrainingLog(run_dir / "training_log.jsonl")] if run_dir is not None else []
    logger.info(f"Variant {variant.name}: budget={budget} ablation={sorted(config.ablation)}")
    state = trainer.train(callbacks)
    scores = trainer.evaluate()
    logger.info(f"Variant {variant.name}: miou={scores.miou:.4f} pa={scores.pa:.4f}")
    return VariantResult(
        name=variant.name,
        budget=budget,
        ablation=sorted(config.ablation),
        steps=state.step,
        scores=scores,
    )


def resolve_variants(
    names: Sequence[str], budgets: Sequence[Union[int, str]] = ()
) -> list[Variant]:
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ConfigError(
            f"unknown variants {', '.join(unknown)}; choose from {', '.join(VARIANTS)}"
        )
    return [VARIANTS[n] for n in names] + [budget_variant(b) for b in budgets]


def run_ablation_suite(
    source: SourceDataset,
    target: TargetDataset,
    base: TrainingConfig,
    names: Sequence[str] = tuple(VARIANTS),
    budgets: Sequence[Union[int, str]] = (),
    device: str = "cpu",
    out_dir: Optional[Union[Path, str]] = None,
) -> list[VariantResult]:
    """Train every requested variant from the same seed and return results ranked by MIoU."""
    out = Path(out_dir) if out_dir is not None else None
    results = [
        run_variant(variant, source, target, base, device, out)
        for variant in resolve_variants(names, budgets)
    ]
    results.sort(key=lambda r: r.scores.miou, reverse=True)
    if out is not None:
        results_table(results).to_csv(out / "ablation.tsv", sep="\t", index=False)
    return results


def results_table(results: Sequence[VariantResult]) -> pd.DataFrame:
    return pd.DataFrame([r.row() for r in results])
