"""
Command-line entry point.

Commands: ``generate-synth``, ``init-config``, ``train``, ``eval``, ``predict`` and ``ablate``.
Exit codes: 0 success, 1 partial failure, 2 usage / config / data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import torch
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from boundary_transfer.checkpoint import load_checkpoint
from boundary_transfer.config import (
    ABLATION_FLAGS,
    RuntimeSettings,
    TrainingConfig,
    load_config,
    save_config,
    setup_logging,
)
from boundary_transfer.datamodel import Image, Mask, binarize
from boundary_transfer.datasets import (
    exclude_categories,
    load_image,
    load_labeled,
    load_source,
    load_target,
    read_manifest,
    save_mask,
)
from boundary_transfer.errors import (
    BoundaryTransferError,
    ConfigError,
    DatasetError,
    NumericalFailure,
)
from boundary_transfer.experiments import VARIANTS, results_table, run_ablation_suite
from boundary_transfer.metrics import Scores, evaluate
from boundary_transfer.networks import predict
from boundary_transfer.synthetic import SynthSpec, read_synth_spec, write_synthetic
from boundary_transfer.trainer import Trainer, TrainingLog
from boundary_transfer.visualize import overlay_panel, triplet_panel

logger = logging.getLogger(__name__)
console = Console()

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def _print_scores(scores: Scores, title: str) -> None:
    table = Table(title=title)
    table.add_column("metric")
    table.add_column("score (%)", justify="right")
    for name, value in scores.percentages().items():
        if name != "pixels":
            table.add_row(name.upper(), f"{value:.2f}")
    table.add_row("pixels", str(scores.pixels))
    console.print(table)


def write_scores(scores: Scores, path: Path) -> Path:
    """One JSON line: pa, mpa, miou, fwiou (percent, two decimals) and pixels."""
    path.write_text(json.dumps(scores.percentages()) + "\n", encoding="utf-8")
    return path


def cmd_generate_synth(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    setup_logging(None, settings.log_level)
    spec = read_synth_spec(args.spec) if args.spec else SynthSpec()
    overrides = {"seed": args.seed, "image_size": args.image_size}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        try:
            spec = SynthSpec.model_validate({**spec.model_dump(), **overrides})
        except ValidationError as e:
            raise ConfigError(f"invalid synthetic spec: {e}") from e

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        console.print(f"[red]{out} exists and is not empty; pass --overwrite to replace it[/red]")
        return EXIT_USAGE
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    except OSError as e:
        console.print(f"[red]cannot write to {out.parent}: {e}[/red]")
        return EXIT_USAGE
    try:
        counts = write_synthetic(spec, staging)
        if out.exists():
            shutil.rmtree(out)
        os.replace(staging, out)
    except (OSError, BoundaryTransferError) as e:
        shutil.rmtree(staging, ignore_errors=True)
        logger.error(f"Writing {out} failed: {e}")
        console.print(f"[red]writing {out} failed: {e}[/red]")
        return EXIT_USAGE

    table = Table(title=f"Synthetic benchmark in {out}")
    table.add_column("family")
    table.add_column("role")
    table.add_column("samples", justify="right")
    for family, count in counts.items():
        role = "target" if family == spec.target_family else "source"
        table.add_row(family, role, str(count))
    console.print(table)
    return EXIT_OK


def cmd_init_config(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    values = {"image_size": args.image_size} if args.image_size else {}
    config = TrainingConfig(**values)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_config(config, out)
    console.print(f"Config template written to {out}")
    return EXIT_OK


def _training_config(args: argparse.Namespace) -> TrainingConfig:
    return load_config(args.config).with_overrides(
        seed=args.seed,
        labeled_budget=args.labeled_budget,
        ablation=args.ablation,
        max_steps=args.steps,
        image_size=args.image_size,
    )


def _load_pair(args: argparse.Namespace, config: TrainingConfig):
    source = load_source(read_manifest(args.source, config.seed), config.image_size)
    if args.exclude_category:
        source = exclude_categories(source, args.exclude_category)
    target = load_target(
        read_manifest(args.target, config.seed),
        config.image_size,
        config.labeled_budget,
        config.seed,
    )
    return source, target


def _export_triplets(trainer: Trainer, n: int, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    triplets = trainer.debug_triplets(n)
    for i in range(n):
        triplet_panel(triplets, i, out / f"triplets_{i:03d}.png")
    logger.info(f"Exported {n} triplet panels to {out}")


def cmd_train(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(out / "train.log", settings.log_level)
    config = _training_config(args)
    source, target = _load_pair(args, config)
    save_config(config, out / "config.txt")

    checkpoints = out / "checkpoints"
    trainer = Trainer(source, target, config, device=settings.device, checkpoint_dir=checkpoints)
    if args.export_triplets:
        _export_triplets(trainer, args.export_triplets, out / "triplets")
    try:
        trainer.train([TrainingLog(out / "training_log.jsonl")])
    except NumericalFailure as e:
        logger.error(f"Training aborted: {e}")
        last = checkpoints / "last.pt"
        resume = (
            f"Last good checkpoint: {last}"
            if last.exists()
            else "No checkpoint was written before the failure"
        )
        console.print(Panel(f"{e}\n{resume}", title="numerical failure"))
        return EXIT_NUMERICAL
    trainer.save(checkpoints / "final.pt")

    if target.evaluation_samples():
        scores = trainer.evaluate()
        write_scores(scores, out / "scores.json")
        _print_scores(scores, f"Target evaluation after {trainer.state.step} steps")
    else:
        logger.warning("Target has no evaluation split; skipping final evaluation")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(out / "eval.log", settings.log_level)
    checkpoint = load_checkpoint(args.checkpoint, map_location=settings.device)
    net = checkpoint.build_segmenter().to(settings.device)
    manifest = read_manifest(args.dataset, checkpoint.config.seed)
    samples = load_labeled(manifest, net.image_size, net.spec.in_channels)
    if args.split != "all":
        keep = {e.stem for e in manifest.split(args.split)}
        samples = [s for s in samples if s.stem in keep]
    if not samples:
        raise DatasetError(f"{args.dataset} has no masks to score in split {args.split!r}")
    scores = evaluate(
        net, samples, threshold=checkpoint.config.eval_threshold, device=settings.device
    )
    print(json.dumps(scores.percentages()))
    _print_scores(scores, f"{len(samples)} samples from {args.dataset}")
    write_scores(scores, out / "scores.json")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(out / "predict.log", settings.log_level)
    checkpoint = load_checkpoint(args.checkpoint, map_location=settings.device)
    net = checkpoint.build_segmenter().to(settings.device)
    failures = []
    for raw in args.images:
        path = Path(raw)
        try:
            image = load_image(path, net.image_size, net.spec.in_channels)
            soft = predict(net, Image(image.data.to(settings.device)))
            soft = Mask(soft.data.cpu())
            save_mask(soft, out / f"{path.stem}_soft.png")
            save_mask(binarize(soft, args.threshold), out / f"{path.stem}_mask.png")
            if args.overlay:
                overlay_panel(image, soft, out / f"{path.stem}_overlay.png", args.threshold)
        except (OSError, BoundaryTransferError, ValueError) as e:
            logger.error(f"{path}: {e}")
            failures.append(f"{path}: {e}")
    if failures:
        console.print(Panel("\n".join(failures), title=f"{len(failures)} image(s) failed"))
        return EXIT_PARTIAL
    console.print(f"Predicted {len(args.images)} image(s) into {out}")
    return EXIT_OK


def _budget(value: str):
    return value if value == "all" else int(value)


def cmd_ablate(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(out / "ablate.log", settings.log_level)
    config = _training_config(args)
    source, target = _load_pair(args, config)
    names = [n.strip() for n in args.variants.split(",") if n.strip()]
    budgets = [_budget(b.strip()) for b in (args.budgets or "").split(",") if b.strip()]
    results = run_ablation_suite(
        source, target, config, names, budgets, device=settings.device, out_dir=out
    )
    frame = results_table(results)
    table = Table(title="Ablation results (ranked by MIoU)")
    for column in frame.columns:
        table.add_column(str(column))
    for row in frame.itertuples(index=False):
        table.add_row(*(str(v) for v in row))
    console.print(table)
    return EXIT_OK


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="flat key = value training config")
    parser.add_argument("--source", required=True, help="source dataset directory")
    parser.add_argument("--target", required=True, help="target dataset directory")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--labeled-budget", type=int, help="override the few-shot budget")
    parser.add_argument(
        "--ablation", help=f"comma-separated flags from: {', '.join(ABLATION_FLAGS)}"
    )
    parser.add_argument("--steps", type=int, help="override max_steps")
    parser.add_argument("--image-size", type=int, help="override image_size")
    parser.add_argument(
        "--exclude-category",
        action="append",
        default=[],
        help="drop this category from the source pool (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boundary-transfer",
        description="Few-shot foreground segmentation by adversarial boundary transfer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-synth", help="write the synthetic shapes benchmark")
    p.add_argument("--spec", help="synthetic spec file (key = value)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override spec seed")
    p.add_argument("--image-size", type=int, help="override spec image_size")
    p.add_argument("--overwrite", action="store_true", help="replace an existing directory")
    p.set_defaults(handler=cmd_generate_synth)

    p = sub.add_parser("init-config", help="write a complete training config template")
    p.add_argument("--out", required=True, help="config file to write")
    p.add_argument("--image-size", type=int, help="image size (radius range follows it)")
    p.set_defaults(handler=cmd_init_config)

    p = sub.add_parser("train", help="run adversarial boundary-transfer training")
    _add_training_flags(p)
    p.add_argument(
        "--export-triplets", type=int, default=0, help="write N triplet panels before training"
    )
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["all", "train", "eval"], default="all")
    p.add_argument(
        "--out", help="directory for scores.json and eval.log (default: the checkpoint directory)"
    )
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", help="segment images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true", help="also write input|mask|foreground panels")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("images", nargs="+")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("ablate", help="train and compare training variants")
    _add_training_flags(p)
    p.add_argument(
        "--variants",
        default="full,no_adversarial,single_discriminator",
        help=f"comma-separated variants from: {', '.join(VARIANTS)}",
    )
    p.add_argument("--budgets", help="comma-separated extra labeled budgets, e.g. 0,5,all")
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    settings = RuntimeSettings.from_env()
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)
    try:
        return args.handler(args, settings)
    except NumericalFailure as e:
        logger.error(str(e))
        console.print(f"[red]numerical failure:[/red] {e}")
        return EXIT_NUMERICAL
    except BoundaryTransferError as e:
        logger.error(str(e))
        console.print(f"[red]error:[/red] {e}")
        return EXIT_USAGE
