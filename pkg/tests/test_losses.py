import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from boundary_transfer.datamodel import Mask, complement
from boundary_transfer.errors import (
    CriticGradientError,
    NumericalFailure,
    ShapeMismatchError,
    SoftMaskError,
)
from boundary_transfer.losses import (
    LossReport,
    critic_loss_inner,
    critic_loss_outer,
    generator_loss,
    gradient_penalty,
    reconstruction_loss,
    self_supervised_loss,
)
from boundary_transfer.networks import (
    BoundaryCritic,
    CriticSpec,
    SegmentationNetwork,
    SegmenterSpec,
    criticize,
    init_weights,
    segment,
)
from boundary_transfer.transforms import AffineTransform, compose_transform, warp
from boundary_transfer.triplets import fake_inner, fake_outer, interpolate, real_inner, real_outer

from .conftest import random_hard_batch, random_image

SIZE = 8


class LinearCritic(nn.Module):
    side = "outer"

    def __init__(self, n_inputs: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(n_inputs, generator=g, dtype=torch.float64)
        self.weight = nn.Parameter(w / w.norm())

    def forward(self, x):
        return x.flatten(1) @ self.weight


class ConstantCritic(nn.Module):
    side = "outer"

    def __init__(self):
        super().__init__()
        self.bias = nn.Parameter(torch.tensor(0.3, dtype=torch.float64))

    def forward(self, x):
        return self.bias.expand(x.shape[0])


class FrozenCritic(nn.Module):
    side = "outer"

    def forward(self, x):
        return torch.zeros(x.shape[0], dtype=x.dtype)


class LookupNet(nn.Module):
    """Returns a stored mask for one input and its warped version for anything else."""

    def __init__(self, x_plain, m_plain, m_warped):
        super().__init__()
        self.spec = SegmenterSpec(backbone="shallow", in_channels=3, image_size=x_plain.shape[-1])
        self.x_plain, self.m_plain, self.m_warped = x_plain, m_plain, m_warped

    @property
    def image_size(self):
        return self.spec.image_size

    def forward(self, data):
        return self.m_plain if torch.equal(data, self.x_plain) else self.m_warped


def _disk(size, centre, radius):
    yy, xx = np.mgrid[:size, :size]
    inside = (yy - centre[0]) ** 2 + (xx - centre[1]) ** 2 <= radius**2
    return torch.from_numpy(inside.astype(np.float64))[None, None]


def _tiny_segmenter(seed: int, sharpen: float = 5.0) -> SegmentationNetwork:
    torch.manual_seed(seed)
    net = SegmentationNetwork(SegmenterSpec(backbone="shallow", widths=(2,), image_size=SIZE))
    init_weights(net)
    net = net.double()
    with torch.no_grad():
        net.body.conv2.weight.mul_(sharpen)
        net.body.conv2.bias.fill_(0.1)
    return net


def _tiny_critic(side: str, seed: int) -> BoundaryCritic:
    torch.manual_seed(seed)
    critic = BoundaryCritic(CriticSpec(side=side, in_channels=7, width=2, depth=2))
    init_weights(critic)
    with torch.no_grad():
        for p in critic.parameters():
            p.add_(0.05 * torch.randn_like(p))
    return critic.double()


def _check_gradient(loss_fn, params, n_coords=50, h=1e-6, seed=0):
    params = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        i = int(flat - offsets[k])
        with torch.no_grad():
            p = params[k].view(-1)
            original = p[i].item()
            p[i] = original + h
            plus = loss_fn().item()
            p[i] = original - h
            minus = loss_fn().item()
            p[i] = original
        numeric = (plus - minus) / (2 * h)
        analytic = grads[k].reshape(-1)[i].item()
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8, (
            k,
            i,
            analytic,
            numeric,
        )


def _stable_setup(min_margin=1e-3):
    """A tiny segmenter and inputs whose predictions sit clear of the 0.5 threshold."""
    rng = np.random.default_rng(0)
    A = compose_transform(10.0, 1.1, (0.05, 0.0))
    for seed in range(200):
        net = _tiny_segmenter(seed)
        x = random_image(rng, size=SIZE, batch=2)
        with torch.no_grad():
            m1 = segment(net, warp(x, A)).data
            m2 = segment(net, x).data
            loss = self_supervised_loss(net, x, A, 1)
        margin = min(float((m1 - 0.5).abs().min()), float((m2 - 0.5).abs().min()))
        if margin > min_margin and float(loss) > 1e-6:
            return net, x, A, rng
    raise AssertionError("no stable tiny segmenter found")


def test_reconstruction_examples():
    m = Mask(torch.tensor([[[1.0, 0.0], [0.0, 1.0]]]).repeat(1, 4, 4), hard=True)
    assert float(reconstruction_loss(Mask(m.data.clone()), m)) == 0.0
    assert float(reconstruction_loss(complement(m), m)) == 1.0
    pred = m.data.clone()
    pred[0, :4, :4] = 1 - pred[0, :4, :4]
    assert float(reconstruction_loss(Mask(pred), m)) == pytest.approx(0.25)


def test_reconstruction_needs_hard_target_and_same_shape():
    soft = Mask(torch.full((1, 8, 8), 0.5))
    with pytest.raises(SoftMaskError):
        reconstruction_loss(soft, soft)
    with pytest.raises(ShapeMismatchError):
        reconstruction_loss(soft, Mask(torch.zeros(2, 1, 8, 8), hard=True))


def test_self_supervised_identity_is_zero():
    net, x, _, _ = _stable_setup()
    assert float(self_supervised_loss(net, x, AffineTransform.identity(), 1)) == 0.0


def test_self_supervised_zero_network_is_zero(rng):
    net = _tiny_segmenter(0)
    with torch.no_grad():
        net.body.conv2.weight.zero_()
        net.body.conv2.bias.fill_(-50.0)
    x = random_image(rng, size=SIZE, batch=2)
    loss = self_supervised_loss(net, x, compose_transform(20.0, 1.0, (0.1, 0.1)), 1)
    assert float(loss) == 0.0


def test_self_supervised_equivariant_oracle_is_near_zero(rng):
    size = 32
    x = random_image(rng, size=size, batch=1)
    A = AffineTransform.translation(0, 3, size, size)
    plain = _disk(size, (15, 12), 6)
    shifted = warp(Mask(plain), A).data
    net = LookupNet(x.data, plain, shifted)
    assert float(self_supervised_loss(net, x, A, 2)) < 1e-3


def test_gradient_penalty_unit_linear_critic_is_zero(rng):
    x = random_image(rng, size=SIZE, batch=3)
    m = random_hard_batch(rng, 3, size=SIZE)
    soft = Mask(torch.from_numpy(rng.random((3, 1, SIZE, SIZE))))
    mixed = interpolate(real_outer(x, m), fake_outer(x, soft), rng.random(3))
    critic = LinearCritic(7 * SIZE * SIZE)
    assert float(gradient_penalty(critic, mixed, lambda_gp=10.0)) < 1e-6


def test_gradient_penalty_constant_critic_is_lambda(rng):
    x = random_image(rng, size=SIZE, batch=2)
    m = random_hard_batch(rng, 2, size=SIZE)
    mixed = interpolate(real_outer(x, m), fake_outer(x, m), 0.5)
    assert float(gradient_penalty(ConstantCritic(), mixed, lambda_gp=10.0)) == pytest.approx(10.0)
    assert float(gradient_penalty(ConstantCritic(), mixed, lambda_gp=0.0)) == 0.0


def test_gradient_penalty_under_no_grad(rng):
    x = random_image(rng, size=SIZE, batch=2)
    m = random_hard_batch(rng, 2, size=SIZE)
    soft = Mask(torch.from_numpy(rng.random((2, 1, SIZE, SIZE))))
    mixed = interpolate(real_outer(x, m), fake_outer(x, soft), rng.random(2))
    critic = LinearCritic(7 * SIZE * SIZE)
    with torch.no_grad():
        critic.weight.mul_(3.0)
        inside = gradient_penalty(critic, mixed, lambda_gp=10.0)
    assert float(inside) == pytest.approx(40.0)
    assert inside.requires_grad
    assert float(inside) == float(gradient_penalty(critic, mixed, lambda_gp=10.0))


def test_gradient_penalty_needs_a_differentiable_critic(rng):
    x = random_image(rng, size=SIZE, batch=2)
    m = random_hard_batch(rng, 2, size=SIZE)
    mixed = interpolate(real_outer(x, m), fake_outer(x, m), 0.5)
    with pytest.raises(CriticGradientError):
        gradient_penalty(FrozenCritic(), mixed, lambda_gp=10.0)


@pytest.mark.parametrize("loss", [critic_loss_outer, critic_loss_inner])
def test_critic_loss_examples(loss):
    assert float(loss([1.0, 1.0], [1.0, 1.0], [2.0, 2.0], 0.0)) == pytest.approx(-1.0)
    assert float(loss([0.4], [0.4], [0.4], 0.0)) == pytest.approx(0.0)
    assert float(loss([0.0], [0.0], [0.0], 10.0)) == pytest.approx(10.0)
    assert float(loss([3.0], None, [1.0], 0.5)) == pytest.approx(2.5)
    with pytest.raises(ShapeMismatchError):
        loss([1.0, 2.0], [1.0], [1.0, 2.0], 0.0)


@settings(max_examples=50, deadline=None)
@given(
    scores=st.lists(st.floats(-100, 100), min_size=9, max_size=9),
    c=st.floats(-100, 100),
)
def test_critic_loss_ignores_a_common_score_shift(scores, c):
    fake, pseudo, real = (torch.tensor(scores[i : i + 3], dtype=torch.float64) for i in (0, 3, 6))
    base = critic_loss_outer(fake, pseudo, real, 1.0)
    shifted = critic_loss_outer(fake + c, pseudo + c, real + c, 1.0)
    assert float(shifted) == pytest.approx(float(base), abs=1e-9)


def test_generator_loss_examples():
    assert generator_loss(0.2, 0.1, 0.5, 0.3, 1.0, 1.0) == pytest.approx(-0.5)
    assert generator_loss(0.2, 0.1, 0.0, 0.0, 0.0, 0.0) == 0.0
    assert generator_loss(0.2, 0.1, 0.0, 0.3, 2.0, 1.0) == pytest.approx(0.2)


def test_loss_report_check_and_merge():
    report = LossReport(rec=0.5)
    assert report.check(3, "generator") is report
    merged = report.merge(LossReport(gp_outer=2.0, rec=9.0), ["gp_outer"])
    assert merged.rec == 0.5 and merged.gp_outer == 2.0
    assert merged.record(4)["step"] == 4
    with pytest.raises(NumericalFailure) as info:
        LossReport(rec=math.nan).check(7, "generator")
    assert info.value.step == 7 and info.value.phase == "generator"


def test_reconstruction_gradient_matches_finite_differences(rng):
    net = _tiny_segmenter(1)
    x = random_image(rng, size=SIZE, batch=2)
    m = random_hard_batch(rng, 2, size=SIZE)
    _check_gradient(lambda: reconstruction_loss(segment(net, x), m), net.parameters())


def test_self_supervised_gradient_matches_finite_differences():
    net, x, A, _ = _stable_setup()
    _check_gradient(lambda: self_supervised_loss(net, x, A, 1), net.parameters())


@pytest.mark.parametrize("side", ["outer", "inner"])
def test_critic_loss_gradient_matches_finite_differences(rng, side):
    net = _tiny_segmenter(2)
    critic = _tiny_critic(side, 3)
    x_source = random_image(rng, size=SIZE, batch=2)
    x_target = random_image(rng, size=SIZE, batch=2)
    m = random_hard_batch(rng, 2, size=SIZE)
    eps = rng.random(2)
    real_fn, fake_fn = (real_outer, fake_outer) if side == "outer" else (real_inner, fake_inner)
    loss_fn = critic_loss_outer if side == "outer" else critic_loss_inner
    with torch.no_grad():
        prediction = segment(net, x_target)
    real, fake = real_fn(x_source, m), fake_fn(x_target, prediction)
    pseudo = real_fn(x_source, random_hard_batch(rng, 2, size=SIZE))

    def loss():
        return loss_fn(
            criticize(critic, fake),
            criticize(critic, pseudo),
            criticize(critic, real),
            gradient_penalty(critic, interpolate(real, fake, eps), lambda_gp=10.0),
        )

    _check_gradient(loss, critic.parameters())


def test_generator_gradient_matches_finite_differences():
    net, x_u, A, rng = _stable_setup()
    outer, inner = _tiny_critic("outer", 4), _tiny_critic("inner", 5)
    for p in list(outer.parameters()) + list(inner.parameters()):
        p.requires_grad_(False)
    x_l = random_image(rng, size=SIZE, batch=2)
    m_l = random_hard_batch(rng, 2, size=SIZE)

    def loss():
        prediction = segment(net, x_u)
        return generator_loss(
            reconstruction_loss(segment(net, x_l), m_l),
            self_supervised_loss(net, x_u, A, 1),
            criticize(outer, fake_outer(x_u, prediction)).mean(),
            criticize(inner, fake_inner(x_u, prediction)).mean(),
            tau=1.0,
            eta=1.0,
        )

    _check_gradient(loss, net.parameters())
