"""
Alternating adversarial training.

One outer step runs ``n_critic`` critic updates followed by one segmenter update. Critic updates
score fake triplets built from no-gradient predictions on target images against real and pseudo
triplets from the source pool; the segmenter update combines reconstruction on the labeled target
batch, boundary-band equivariance on an unlabeled batch and the critics' scores of fresh fakes.

All host-side randomness comes from one numpy ``Generator`` owned by the trainer state, so a run is
reproducible from its seed and resumable from a checkpoint.
"""

from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Protocol, Sequence

import numpy as np
import torch

from boundary_transfer.checkpoint import Checkpoint, capture, save_checkpoint
from boundary_transfer.config import TrainingConfig
from boundary_transfer.datamodel import Image, Mask, Side, SourceDataset, TargetDataset, Triplet
from boundary_transfer.datasets import check_disjoint
from boundary_transfer.errors import ConfigError, DatasetError
from boundary_transfer.losses import (
    CRITIC_FIELDS,
    LossReport,
    critic_loss_inner,
    critic_loss_outer,
    generator_loss,
    gradient_penalty,
    reconstruction_loss,
    self_supervised_loss,
)
from boundary_transfer.metrics import Scores, evaluate
from boundary_transfer.networks import (
    JOINT,
    BoundaryCritic,
    SegmentationNetwork,
    build_critic,
    build_segmenter,
    criticize,
    parameter_digest,
    segment,
)
from boundary_transfer.transforms import augment_pair, sample_transforms
from boundary_transfer.triplets import (
    fake_inner,
    fake_outer,
    interpolate,
    pseudo_inner,
    pseudo_outer,
    real_inner,
    real_outer,
    sample_epsilon,
    sample_radii,
)

logger = logging.getLogger(__name__)

SEGMENTER = "segmenter"
OUTER = Side.OUTER.value
INNER = Side.INNER.value


class TrainingCallback(Protocol):
    def on_step(self, step: int, report: LossReport) -> None: ...


class TrainingLog:
    """Appends one JSON object per outer step to a line-delimited log file."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def on_step(self, step: int, report: LossReport) -> None:
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(report.record(step)) + "\n")


@dataclass
class TrainerState:
    step: int
    segmenter: SegmentationNetwork
    critics: dict[str, BoundaryCritic]
    optimizers: dict[str, torch.optim.Adam]
    rng: np.random.Generator
    pretrained: bool = False
    best_miou: Optional[float] = None
    evals_since_best: int = 0
    stopped_early: bool = False
    history: list[dict] = field(default_factory=list)

    def digests(self) -> dict[str, str]:
        """Parameter hashes of every network, keyed like ``optimizers``."""
        result = {SEGMENTER: parameter_digest(self.segmenter)}
        result.update({side: parameter_digest(c) for side, c in self.critics.items()})
        return result

    def bookkeeping(self) -> dict:
        return {
            "pretrained": self.pretrained,
            "best_miou": self.best_miou,
            "evals_since_best": self.evals_since_best,
            "stopped_early": self.stopped_early,
        }


def _adam(params: Iterable[torch.nn.Parameter], config: TrainingConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        params, lr=config.adam_alpha, betas=(config.adam_beta1, config.adam_beta2)
    )


def critic_sides(config: TrainingConfig) -> list[str]:
    sides = []
    if config.uses_outer:
        sides.append(OUTER)
    if config.uses_inner:
        sides.append(INNER)
    if config.uses_joint:
        sides.append(JOINT)
    return sides


_SEED_OFFSETS = {OUTER: 1, INNER: 2, JOINT: 3}


def init_state(config: TrainingConfig, channels: int = 3, device: str = "cpu") -> TrainerState:
    segmenter = build_segmenter(config, channels, seed=config.seed).to(device)
    critics = {
        side: build_critic(config, side, channels, seed=config.seed + _SEED_OFFSETS[side])
        for side in critic_sides(config)
    }
    critics = {side: critic.to(device) for side, critic in critics.items()}
    optimizers = {SEGMENTER: _adam(segmenter.parameters(), config)}
    optimizers.update({side: _adam(c.parameters(), config) for side, c in critics.items()})
    return TrainerState(
        step=0,
        segmenter=segmenter,
        critics=critics,
        optimizers=optimizers,
        rng=np.random.default_rng(config.seed),
    )


def restore_state(checkpoint: Checkpoint, device: str = "cpu") -> TrainerState:
    config = checkpoint.config
    segmenter = checkpoint.build_segmenter().to(device)
    critics = {side: checkpoint.build_critic(side).to(device) for side in checkpoint.critic_specs}
    optimizers = {SEGMENTER: _adam(segmenter.parameters(), config)}
    optimizers.update({side: _adam(c.parameters(), config) for side, c in critics.items()})
    for name, optimizer in optimizers.items():
        if name in checkpoint.optimizer_states:
            optimizer.load_state_dict(checkpoint.optimizer_states[name])
    rng = np.random.default_rng(config.seed)
    if checkpoint.rng_state is not None:
        rng.bit_generator.state = checkpoint.rng_state
    extra = checkpoint.extra
    return TrainerState(
        step=checkpoint.step,
        segmenter=segmenter,
        critics=critics,
        optimizers=optimizers,
        rng=rng,
        pretrained=bool(extra.get("pretrained", False)),
        best_miou=extra.get("best_miou"),
        evals_since_best=int(extra.get("evals_since_best", 0)),
        stopped_early=bool(extra.get("stopped_early", False)),
    )


@contextlib.contextmanager
def frozen(modules: Iterable[torch.nn.Module]) -> Iterator[None]:
    """Stop parameter gradients of ``modules`` while still differentiating through them."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)


def _value(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


class Trainer:
    """Runs the alternating loop over a source and a target dataset.

    Args:
        source: Fully labeled source pool
        target: Target pool with its few-shot labeled subset
        config: Hyperparameters; ``labeled_budget`` must match the target split
        device: torch device for networks and batches
        state: Resume from this state instead of initializing from ``config.seed``
        checkpoint_dir: Where periodic checkpoints go; ``None`` disables them
    """

    def __init__(
        self,
        source: SourceDataset,
        target: TargetDataset,
        config: TrainingConfig,
        device: str = "cpu",
        state: Optional[TrainerState] = None,
        checkpoint_dir: Optional[Path | str] = None,
    ):
        if len(source) == 0:
            raise DatasetError("source dataset is empty")
        if len(target.training_images()) == 0:
            raise DatasetError("target dataset has no training images")
        check_disjoint(source, target)
        if len(target.labeled) != config.labeled_budget:
            raise ConfigError(
                f"target has {len(target.labeled)} labeled samples, "
                f"config labeled_budget is {config.labeled_budget}"
            )
        self.config = config
        self.device = device
        self.source = source
        self.target = target
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

        self._source_images = source.image_tensor()
        self._source_masks = source.mask_tensor()
        self._target_images = torch.stack([image.data for image in target.training_images()])
        self._labeled_images = (
            torch.stack([s.image.data for s in target.labeled]) if target.labeled else None
        )
        self._labeled_masks = (
            torch.stack([s.mask.data for s in target.labeled]) if target.labeled else None
        )
        self._unlabeled_images = (
            torch.stack([image.data for image in target.unlabeled])
            if target.unlabeled
            else self._labeled_images
        )
        self._labeled_count = len(target.labeled)

        channels = self._source_images.shape[1]
        self.state = state if state is not None else init_state(config, channels, device)
        logger.info(
            f"Trainer ready: source={len(source)} target labeled={len(target.labeled)} "
            f"unlabeled={len(target.unlabeled)} critics={sorted(self.state.critics)} "
            f"device={device}"
        )

    @classmethod
    def from_checkpoint(
        cls,
        checkpoint: Checkpoint,
        source: SourceDataset,
        target: TargetDataset,
        device: str = "cpu",
        checkpoint_dir: Optional[Path | str] = None,
        config: Optional[TrainingConfig] = None,
    ) -> "Trainer":
        return cls(
            source,
            target,
            config or checkpoint.config,
            device=device,
            state=restore_state(checkpoint, device),
            checkpoint_dir=checkpoint_dir,
        )

    # sampling

    def _draw(self, pool: torch.Tensor, n: int) -> torch.Tensor:
        index = torch.from_numpy(self.state.rng.integers(0, pool.shape[0], size=n))
        return pool[index].to(self.device)

    def _source_batch(self, n: int) -> tuple[Image, Mask]:
        index = torch.from_numpy(self.state.rng.integers(0, len(self.source), size=n))
        return (
            Image(self._source_images[index].to(self.device)),
            Mask(self._source_masks[index].to(self.device), hard=True),
        )

    def _target_batch(self, n: int) -> Image:
        return Image(self._draw(self._target_images, n))

    def _labeled_batch(self, n: int) -> tuple[Image, Mask]:
        index = torch.from_numpy(self.state.rng.integers(0, self._labeled_count, size=n))
        x = Image(self._labeled_images[index].to(self.device))
        m = Mask(self._labeled_masks[index].to(self.device), hard=True)
        if self.config.augment_labeled:
            x, m = augment_pair(x, m, sample_transforms(self.state.rng, n, self.config))
        return x, m

    def _unlabeled_batch(self, n: int) -> Image:
        return Image(self._draw(self._unlabeled_images, n))

    # critic update

    def _side_triplets(
        self, side: str, x_t: Image, m_pred: Mask, x_s: Image, m_s: Mask, radii: Sequence[int]
    ) -> tuple[Triplet, Triplet, Optional[Triplet]]:
        with_pseudo = "no_pseudo" not in self.config.ablation
        if side == OUTER:
            pseudo = pseudo_outer(x_s, m_s, radii) if with_pseudo else None
            return fake_outer(x_t, m_pred), real_outer(x_s, m_s), pseudo
        pseudo = (
            pseudo_inner(x_s, m_s, radii, mode=self.config.inner_pseudo_mode)
            if with_pseudo
            else None
        )
        return fake_inner(x_t, m_pred), real_inner(x_s, m_s), pseudo

    def _update(self, name: str, loss: torch.Tensor) -> None:
        optimizer = self.state.optimizers[name]
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

    def critic_step(self) -> LossReport:
        """One update of every active critic; the segmenter is only evaluated."""
        cfg, rng = self.config, self.state.rng
        k = cfg.batch_size
        x_t = self._target_batch(k)
        x_s, m_s = self._source_batch(k)
        with torch.no_grad():
            m_pred = segment(self.state.segmenter, x_t)
        radii = {OUTER: sample_radii(rng, k, cfg), INNER: sample_radii(rng, k, cfg)}
        eps = sample_epsilon(rng, k)

        triplets = {
            side: self._side_triplets(side, x_t, m_pred, x_s, m_s, radii[side])
            for side in (OUTER, INNER)
            if side in self.state.critics or JOINT in self.state.critics
        }
        values: dict[str, float] = {}
        losses: dict[str, torch.Tensor] = {}
        for side, critic in self.state.critics.items():
            if side == JOINT:
                parts = [triplets[OUTER], triplets[INNER]]
                fake, real, pseudo = ([p[i] for p in parts] for i in range(3))
                with_pseudo = pseudo[0] is not None
                mixed = [interpolate(r, f, eps) for r, f in zip(real, fake)]
            else:
                fake, real, pseudo = ([t] for t in triplets[side])
                with_pseudo = pseudo[0] is not None
                mixed = [interpolate(real[0], fake[0], eps)]
            gp = gradient_penalty(critic, *mixed, lambda_gp=cfg.lambda_gp)
            loss_fn = critic_loss_inner if side == INNER else critic_loss_outer
            loss = loss_fn(
                criticize(critic, *fake),
                criticize(critic, *pseudo) if with_pseudo else None,
                criticize(critic, *real),
                gp,
            )
            key = INNER if side == INNER else OUTER
            values[f"critic_{key}_total"] = _value(loss)
            values[f"gp_{key}"] = _value(gp)
            losses[side] = loss

        report = LossReport(**values).check(self.state.step, "critic")
        for side, loss in losses.items():
            self._update(side, loss)
        return report

    # segmenter update

    def generator_step(self) -> LossReport:
        """One update of the segmenter; critic parameters stay fixed."""
        cfg, rng, seg = self.config, self.state.rng, self.state.segmenter
        k = cfg.batch_size
        rec = sel = score_outer = score_inner = 0.0

        if cfg.labeled_budget > 0:
            x_l, m_l = self._labeled_batch(k)
            rec = reconstruction_loss(segment(seg, x_l), m_l)
        x_u = self._unlabeled_batch(k)
        if "no_self_sup" not in cfg.ablation:
            transforms = sample_transforms(rng, k, cfg)
            (radius,) = sample_radii(rng, 1, cfg)
            sel = self_supervised_loss(seg, x_u, transforms, radius)

        critics = self.state.critics
        with frozen(critics.values()):
            if critics:
                m_pred = segment(seg, x_u)
                outer, inner = fake_outer(x_u, m_pred), fake_inner(x_u, m_pred)
                if OUTER in critics:
                    score_outer = criticize(critics[OUTER], outer).mean()
                if INNER in critics:
                    score_inner = criticize(critics[INNER], inner).mean()
                if JOINT in critics:
                    score_outer = criticize(critics[JOINT], outer, inner).mean()
            total = generator_loss(rec, sel, score_outer, score_inner, cfg.tau, cfg.eta)
            report = LossReport(
                rec=_value(rec),
                self_sup=_value(sel),
                adv_outer=_value(score_outer),
                adv_inner=_value(score_inner),
                gen_total=_value(total),
            ).check(self.state.step, "generator")
            if isinstance(total, torch.Tensor) and total.requires_grad:
                self._update(SEGMENTER, total)
            else:
                logger.debug(f"Step {self.state.step}: no active segmenter objective")
        return report

    def pretrain(self) -> None:
        """Supervised reconstruction on the source pool before the alternating loop."""
        cfg = self.config
        k = cfg.batch_size
        for i in range(cfg.source_pretrain_steps):
            x_s, m_s = self._source_batch(k)
            if cfg.augment_labeled:
                x_s, m_s = augment_pair(x_s, m_s, sample_transforms(self.state.rng, k, cfg))
            loss = reconstruction_loss(segment(self.state.segmenter, x_s), m_s)
            LossReport(rec=_value(loss)).check(i, "pretrain")
            self._update(SEGMENTER, loss)
        if cfg.source_pretrain_steps:
            logger.info(f"Pretrained on source for {cfg.source_pretrain_steps} steps")
        self.state.pretrained = True

    # loop

    def audit_budget(self) -> None:
        """The labeled subset must still be exactly the configured few-shot budget."""
        if len(self.target.labeled) != self._labeled_count or (
            self._labeled_images is not None
            and self._labeled_images.shape[0] != self.config.labeled_budget
        ):
            raise DatasetError(
                f"labeled subset changed size: {len(self.target.labeled)} "
                f"vs budget {self.config.labeled_budget}"
            )

    def evaluate(self) -> Scores:
        return evaluate(
            self.state.segmenter,
            self.target.evaluation_samples(),
            threshold=self.config.eval_threshold,
            device=self.device,
        )

    def _maybe_stop(self, scores: Scores) -> None:
        state = self.state
        if state.best_miou is None or scores.miou > state.best_miou:
            state.best_miou = scores.miou
            state.evals_since_best = 0
            if self.checkpoint_dir is not None:
                self.save(self.checkpoint_dir / "best.pt")
            return
        state.evals_since_best += 1
        patience = self.config.early_stop_patience
        if patience and state.evals_since_best >= patience:
            state.stopped_early = True
            logger.info(
                f"Early stop at step {state.step}: miou plateaued at {state.best_miou:.4f} "
                f"for {patience} evaluations"
            )

    def train_step(self) -> LossReport:
        critic_report = LossReport()
        if self.state.critics:
            for _ in range(self.config.n_critic):
                critic_report = self.critic_step()
        report = self.generator_step().merge(critic_report, CRITIC_FIELDS)
        self.state.step += 1
        return report

    def train(self, callbacks: Sequence[TrainingCallback] = ()) -> TrainerState:
        cfg, state = self.config, self.state
        if not state.pretrained:
            self.pretrain()
        while state.step < cfg.max_steps and not state.stopped_early:
            report = self.train_step()
            for callback in callbacks:
                callback.on_step(state.step, report)
            if state.step % 50 == 0 or state.step == cfg.max_steps:
                logger.info(
                    f"Step {state.step}/{cfg.max_steps}: gen={report.gen_total:.4f} "
                    f"rec={report.rec:.4f} sel={report.self_sup:.4f} "
                    f"critic_outer={report.critic_outer_total:.4f} "
                    f"critic_inner={report.critic_inner_total:.4f}"
                )
            if cfg.eval_every and state.step % cfg.eval_every == 0:
                self.audit_budget()
                if self.target.evaluation_samples():
                    scores = self.evaluate()
                    state.history.append({"step": state.step, **scores.model_dump()})
                    logger.info(f"Step {state.step}: eval miou={scores.miou:.4f}")
                    self._maybe_stop(scores)
            if self.checkpoint_dir is not None and cfg.checkpoint_every and (
                state.step % cfg.checkpoint_every == 0
            ):
                self.save(self.checkpoint_dir / f"step_{state.step:06d}.pt")
                self.save(self.checkpoint_dir / "last.pt")
        return state

    # persistence

    def checkpoint(self) -> Checkpoint:
        state = self.state
        return capture(
            step=state.step,
            config=self.config,
            segmenter=state.segmenter,
            critics=state.critics,
            optimizers=state.optimizers,
            rng_state=state.rng.bit_generator.state,
            extra=state.bookkeeping(),
        )

    def save(self, path: Path | str) -> Path:
        return save_checkpoint(self.checkpoint(), path)

    def debug_triplets(self, n: int) -> dict[str, Triplet]:
        """Fake, real and pseudo triplets for both sides, drawn from a separate generator so the
        training trajectory is unaffected."""
        cfg = self.config
        rng = np.random.default_rng(cfg.seed + 7919)
        x_t = Image(self._target_images[rng.integers(0, self._target_images.shape[0], n)])
        index = rng.integers(0, len(self.source), n)
        x_s = Image(self._source_images[index])
        m_s = Mask(self._source_masks[index], hard=True)
        with torch.no_grad():
            m_pred = segment(self.state.segmenter, Image(x_t.data.to(self.device)))
        m_pred = Mask(m_pred.data.cpu())
        radii = sample_radii(rng, n, cfg)
        return {
            "fake_outer": fake_outer(x_t, m_pred),
            "real_outer": real_outer(x_s, m_s),
            "pseudo_outer": pseudo_outer(x_s, m_s, radii),
            "fake_inner": fake_inner(x_t, m_pred),
            "real_inner": real_inner(x_s, m_s),
            "pseudo_inner": pseudo_inner(x_s, m_s, radii, mode=cfg.inner_pseudo_mode),
        }


def train(
    source: SourceDataset,
    target: TargetDataset,
    config: TrainingConfig,
    callbacks: Sequence[TrainingCallback] = (),
    device: str = "cpu",
    checkpoint_dir: Optional[Path | str] = None,
) -> TrainerState:
    return Trainer(source, target, config, device=device, checkpoint_dir=checkpoint_dir).train(
        callbacks
    )
