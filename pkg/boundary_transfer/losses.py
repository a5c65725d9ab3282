"""
Training objectives: supervised reconstruction, boundary-band equivariance, the two critic losses
with gradient penalty, and the segmenter's combined objective.

Squared-norm losses are means over pixels and batch.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import torch
from pydantic import BaseModel, ConfigDict

from boundary_transfer.datamodel import Image, Mask, Triplet
from boundary_transfer.errors import (
    CriticGradientError,
    NumericalFailure,
    ShapeMismatchError,
    SoftMaskError,
)
from boundary_transfer.morphology import Radius, weight_map
from boundary_transfer.networks import BoundaryCritic, SegmentationNetwork, critic_input, segment
from boundary_transfer.transforms import AffineTransform, warp

Scores = Union[torch.Tensor, Sequence[float], float]


class LossReport(BaseModel):
    """Scalar summary of one training step, one JSON line in the training log."""

    model_config = ConfigDict(frozen=True)

    rec: float = 0.0
    self_sup: float = 0.0
    adv_outer: float = 0.0
    adv_inner: float = 0.0
    gen_total: float = 0.0
    critic_outer_total: float = 0.0
    critic_inner_total: float = 0.0
    gp_outer: float = 0.0
    gp_inner: float = 0.0

    def check(self, step: int, phase: str) -> "LossReport":
        values = self.model_dump()
        if not all(math.isfinite(v) for v in values.values()):
            raise NumericalFailure(step, phase, values)
        return self

    def merge(self, other: "LossReport", fields: Sequence[str]) -> "LossReport":
        """Copy of this report with ``fields`` taken from ``other``."""
        return self.model_copy(update={name: getattr(other, name) for name in fields})

    def record(self, step: int) -> dict:
        return {"step": step, **self.model_dump()}


CRITIC_FIELDS = ("critic_outer_total", "critic_inner_total", "gp_outer", "gp_inner")
GENERATOR_FIELDS = ("rec", "self_sup", "adv_outer", "adv_inner", "gen_total")


def reconstruction_loss(m_pred: Mask, m: Mask) -> torch.Tensor:
    if not m.hard:
        raise SoftMaskError("reconstruction target must be a hard mask")
    if m_pred.shape != m.shape:
        raise ShapeMismatchError(f"prediction {m_pred.shape} and target {m.shape} differ")
    return ((m_pred.data - m.data) ** 2).mean()


def self_supervised_loss(
    net: SegmentationNetwork, x: Image, A: AffineTransform, r: Radius
) -> torch.Tensor:
    """Equivariance of the segmentation under ``A``, restricted to the boundary bands.

    Compares ``w' * F(A x)`` with ``A (w * F(x))`` where ``w'`` and ``w`` are the weight maps of
    the two predictions; the weight maps are constants.
    """
    m_warped_input = segment(net, warp(x, A))
    m_plain = segment(net, x)
    w_warped_input = weight_map(m_warped_input, r)
    w_plain = weight_map(m_plain, r)
    left = w_warped_input.data * m_warped_input.data
    right = warp(Mask(w_plain.data * m_plain.data), A).data
    return ((left - right) ** 2).mean()


def gradient_penalty(
    critic: BoundaryCritic, *interpolated: Triplet, lambda_gp: float
) -> torch.Tensor:
    """``lambda_gp * mean((||grad_I critic(I)||_2 - 1)^2)`` over the batch of interpolated inputs.

    Args:
        critic: The critic being regularized
        interpolated: One interpolated triplet, or an (outer, inner) pair for the joint critic
        lambda_gp: Penalty coefficient

    Returns:
        Scalar tensor that keeps the graph to the critic parameters, also when called under
        ``torch.no_grad()``
    """
    if lambda_gp == 0:
        return critic_input(critic, *interpolated).new_zeros(())
    with torch.enable_grad():
        x = critic_input(critic, *interpolated).detach().requires_grad_(True)
        scores = critic(x)
        if not scores.requires_grad:
            raise CriticGradientError("critic output does not depend on anything differentiable")
        (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=True, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(x)
        norm = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
        return lambda_gp * ((norm - 1) ** 2).mean()


def _as_scores(values: Scores) -> torch.Tensor:
    scores = values if isinstance(values, torch.Tensor) else torch.as_tensor(values)
    if not scores.is_floating_point():
        scores = scores.to(torch.get_default_dtype())
    return scores.reshape(-1)


def _critic_loss(
    fake: Scores, pseudo: Optional[Scores], real: Scores, gp: Union[torch.Tensor, float]
) -> torch.Tensor:
    fake, real = _as_scores(fake), _as_scores(real)
    if fake.shape != real.shape:
        raise ShapeMismatchError(f"{fake.numel()} fake scores vs {real.numel()} real scores")
    if pseudo is None:
        return fake.mean() - real.mean() + gp
    pseudo = _as_scores(pseudo)
    if pseudo.shape != real.shape:
        raise ShapeMismatchError(f"{pseudo.numel()} pseudo scores vs {real.numel()} real scores")
    return 0.5 * fake.mean() + 0.5 * pseudo.mean() - real.mean() + gp


def critic_loss_outer(
    scores_fake: Scores,
    scores_pseudo: Optional[Scores],
    scores_real: Scores,
    gp: Union[torch.Tensor, float],
) -> torch.Tensor:
    """Outer critic objective (minimized). Without pseudo scores the fake term weighs 1."""
    return _critic_loss(scores_fake, scores_pseudo, scores_real, gp)


def critic_loss_inner(
    scores_fake: Scores,
    scores_pseudo: Optional[Scores],
    scores_real: Scores,
    gp: Union[torch.Tensor, float],
) -> torch.Tensor:
    """Inner critic objective; same form as the outer one over background triplets."""
    return _critic_loss(scores_fake, scores_pseudo, scores_real, gp)


def generator_loss(rec, sel, score_outer, score_inner, tau: float, eta: float):
    """``tau * rec + eta * sel - score_outer - score_inner``; pass 0 for a disabled term."""
    return tau * rec + eta * sel - score_outer - score_inner
