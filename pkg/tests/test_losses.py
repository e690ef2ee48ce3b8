import math

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from lenslesskit.config import LossWeights
from lenslesskit.errors import GraphBreakError, ShapeError
from lenslesskit.losses import (
    CRITIC_TERMS,
    critic_loss_fake,
    critic_loss_real,
    generator_supervised_loss,
    generator_wasserstein_loss,
    gradient_penalty,
    sample_alpha,
    total_critic_loss,
    total_generator_loss,
)
from lenslesskit.physics import fft_convolve

from helpers import constant_critic, finite_difference_agreement, linear_critic, tiny_setup


class FirstPixel(nn.Module):
    def forward(self, x):
        return x.flatten(1)[:, 0]


class SquaredNorm(nn.Module):
    """D(x) = 0.5 ||x||^2, so grad D(x) = x and the penalty is known in closed form."""

    def forward(self, x):
        return 0.5 * x.flatten(1).pow(2).sum(dim=1)


def batch(n=4, shape=(3, 8, 8), seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, *shape, generator=g, dtype=torch.float64)


# real / fake terms


def test_real_term_constant_critics():
    x = batch()
    assert critic_loss_real(constant_critic(0.0), x, 1e-4).item() == 0.0
    assert critic_loss_real(constant_critic(1.0), x, 1e-4).item() == pytest.approx(-1 + 1e-4, abs=1e-12)


def test_real_term_without_drift_is_plain_wasserstein():
    x = batch()
    D = linear_critic()
    assert critic_loss_real(D, x, 0.0).item() == pytest.approx(-D(x).mean().item(), rel=1e-12)


def test_drift_term_only_on_reals():
    x = batch()
    D = linear_critic()
    s = D(x)
    expected = -s.mean() + 0.5 * (s ** 2).mean()
    assert critic_loss_real(D, x, 0.5).item() == pytest.approx(expected.item(), rel=1e-12)
    assert critic_loss_fake(D, x).item() == pytest.approx(s.mean().item(), rel=1e-12)


def test_fake_term_constants():
    x = batch()
    assert critic_loss_fake(constant_critic(0.0), x).item() == 0.0
    assert critic_loss_fake(constant_critic(2.5), x).item() == 2.5


def test_constant_critic_gap_vanishes():
    x = batch()
    D = constant_critic(3.0)
    assert (critic_loss_real(D, x, 0.0) + critic_loss_fake(D, x)).item() == 0.0


# gradient penalty


def test_penalty_linear_critic_closed_form():
    reals, fakes = batch(seed=1), batch(seed=2)
    dim = 3 * 8 * 8
    gp = gradient_penalty(linear_critic(), reals, fakes, p_r=1.0, seed=0)
    assert gp.item() == pytest.approx((math.sqrt(dim) - 1) ** 2, rel=1e-4)
    gp2 = gradient_penalty(linear_critic(), reals, fakes, p_r=2.5, seed=0)
    assert gp2.item() == pytest.approx(2.5 * (math.sqrt(dim) - 1) ** 2, rel=1e-4)


def test_penalty_unit_gradient_critic_is_zero():
    assert gradient_penalty(FirstPixel(), batch(seed=1), batch(seed=2), p_r=1.0, seed=0).item() == pytest.approx(0.0, abs=1e-12)


def test_penalty_zero_coefficient():
    assert gradient_penalty(linear_critic(), batch(seed=1), batch(seed=2), p_r=0.0, seed=0).item() == 0.0


def test_penalty_endpoints():
    reals, fakes = batch(seed=1), batch(seed=2)
    D = SquaredNorm()

    def at(z):
        return ((z.flatten(1).norm(dim=1) - 1) ** 2).mean().item()

    assert gradient_penalty(D, reals, fakes, 1.0, alpha=0.0).item() == pytest.approx(at(reals), rel=1e-12)
    assert gradient_penalty(D, reals, fakes, 1.0, alpha=1.0).item() == pytest.approx(at(fakes), rel=1e-12)


def test_penalty_alpha_per_sample():
    reals, fakes = batch(seed=1), batch(seed=2)
    alpha = torch.tensor([0.0, 1.0, 0.25, 0.5], dtype=torch.float64)
    mix = alpha.view(4, 1, 1, 1) * fakes + (1 - alpha.view(4, 1, 1, 1)) * reals
    expected = ((mix.flatten(1).norm(dim=1) - 1) ** 2).mean().item()
    assert gradient_penalty(SquaredNorm(), reals, fakes, 1.0, alpha=alpha).item() == pytest.approx(expected, rel=1e-12)


def test_penalty_seeded_and_one_alpha_per_sample():
    reals, fakes = batch(seed=1), batch(seed=2)
    a = gradient_penalty(SquaredNorm(), reals, fakes, 1.0, seed=7)
    b = gradient_penalty(SquaredNorm(), reals, fakes, 1.0, seed=7)
    assert a.item() == b.item()
    alpha = sample_alpha(4, reals, torch.Generator().manual_seed(0))
    assert alpha.shape == (4, 1, 1, 1) and ((alpha >= 0) & (alpha <= 1)).all()


def test_penalty_non_differentiable_critic():
    class Detached(nn.Module):
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.ones((), dtype=torch.float64))

        def forward(self, x):
            return self.w.expand(x.shape[0])

    with pytest.raises(GraphBreakError):
        gradient_penalty(Detached(), batch(), batch(seed=3), 1.0, seed=0)


def test_penalty_shape_mismatch():
    with pytest.raises(ShapeError):
        gradient_penalty(linear_critic(), batch(n=2), batch(n=3), 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), p_r=st.floats(0.0, 10.0))
def test_penalty_nonnegative_and_finite(seed, p_r):
    torch.manual_seed(seed)
    D = nn.Sequential(nn.Flatten(), nn.Linear(12, 4), nn.Tanh(), nn.Linear(4, 1), nn.Flatten(0)).double()
    reals = torch.rand(3, 3, 2, 2, dtype=torch.float64)
    fakes = torch.rand(3, 3, 2, 2, dtype=torch.float64)
    gp = gradient_penalty(D, reals, fakes, p_r, seed=seed)
    assert math.isfinite(gp.item()) and gp.item() >= 0


# total critic loss


def test_total_critic_loss_zero_critics():
    x, y = batch(seed=1), batch(seed=2)
    w = LossWeights(p_d=0.0, p_r=0.0)
    zero = constant_critic(0.0)
    assert total_critic_loss(zero, zero, x, y, x, y, w)["total"].item() == 0.0


def test_total_critic_loss_is_sum_of_terms():
    G, D_P, D_VGG, x, k, y = tiny_setup()
    x_bar = torch.rand_like(x)
    y_bar = fft_convolve(x_bar, k)
    w = LossWeights()
    terms = total_critic_loss(D_P, D_VGG, x, y, x_bar, y_bar, w, torch.Generator().manual_seed(0))
    g = torch.Generator().manual_seed(0)
    ref = {
        "real_P": critic_loss_real(D_P, y, w.p_d),
        "real_VGG": critic_loss_real(D_VGG, x, w.p_d),
        "fake_P": critic_loss_fake(D_P, y_bar),
        "fake_VGG": critic_loss_fake(D_VGG, x_bar),
        "mix_P": gradient_penalty(D_P, y, y_bar, w.p_r, g),
        "mix_VGG": gradient_penalty(D_VGG, x, x_bar, w.p_r, g),
    }
    for name in CRITIC_TERMS:
        assert terms[name].item() == ref[name].item()
    assert terms["total"].item() == pytest.approx(sum(ref[n].item() for n in CRITIC_TERMS), rel=1e-12)


def test_scaling_p_r_doubles_only_mix_terms():
    G, D_P, D_VGG, x, k, y = tiny_setup()
    x_bar = torch.rand_like(x)
    y_bar = fft_convolve(x_bar, k)
    a = total_critic_loss(D_P, D_VGG, x, y, x_bar, y_bar, LossWeights(p_r=1.0), torch.Generator().manual_seed(0))
    b = total_critic_loss(D_P, D_VGG, x, y, x_bar, y_bar, LossWeights(p_r=2.0), torch.Generator().manual_seed(0))
    for name in ("mix_P", "mix_VGG"):
        assert b[name].item() == pytest.approx(2 * a[name].item(), rel=1e-12)
    for name in ("real_P", "real_VGG", "fake_P", "fake_VGG"):
        assert b[name].item() == a[name].item()


def test_critic_loss_descends_one_step():
    G, D_P, D_VGG, x, k, y = tiny_setup()
    x_bar = torch.rand_like(x)
    y_bar = fft_convolve(x_bar, k)
    params = list(D_P.parameters()) + list(D_VGG.parameters())
    opt = torch.optim.SGD(params, lr=1e-3)

    def loss():
        return total_critic_loss(D_P, D_VGG, x, y, x_bar, y_bar, LossWeights(), torch.Generator().manual_seed(0))["total"]

    before = loss()
    opt.zero_grad()
    before.backward()
    opt.step()
    assert loss().item() < before.item()


def test_critic_loss_gradients_finite_difference():
    G, D_P, D_VGG, x, k, y = tiny_setup()
    with torch.no_grad():
        x_bar = G(y, G.prepare_psf(k))
    y_bar = fft_convolve(x_bar, k)

    def loss():
        return total_critic_loss(D_P, D_VGG, x, y, x_bar, y_bar, LossWeights(), torch.Generator().manual_seed(0))["total"]

    assert finite_difference_agreement([D_P, D_VGG], loss, samples=300) >= 0.99


# generator losses


def test_wasserstein_generator_loss_constants():
    x = batch().requires_grad_(True)
    assert generator_wasserstein_loss(constant_critic(0.0), constant_critic(0.0), x, x).item() == 0.0
    assert generator_wasserstein_loss(constant_critic(1.5), constant_critic(-0.5), x, x).item() == pytest.approx(-1.0)


def test_wasserstein_generator_loss_rejects_detached():
    D = linear_critic()
    attached = batch().requires_grad_(True)
    with pytest.raises(GraphBreakError):
        generator_wasserstein_loss(D, D, attached, batch())
    with pytest.raises(GraphBreakError):
        generator_wasserstein_loss(D, D, batch(), attached)


def test_wasserstein_generator_gradient_nonzero():
    G, D_P, D_VGG, x, k, y = tiny_setup()
    x_bar = G(y, G.prepare_psf(k))
    loss = generator_wasserstein_loss(D_P, D_VGG, x_bar, fft_convolve(x_bar, k))
    grads = torch.autograd.grad(loss, list(G.parameters()), allow_unused=True)
    assert sum(g.abs().sum().item() for g in grads if g is not None) > 0


def test_supervised_loss_examples():
    x, y = batch(seed=1), batch(seed=2)
    assert generator_supervised_loss(x, x, y, y).item() == 0.0
    assert generator_supervised_loss(x, x + 0.5, y, y).item() == pytest.approx(0.5, abs=1e-12)
    d = batch(seed=3)
    assert generator_supervised_loss(x, x + d, y, y).item() == pytest.approx(
        generator_supervised_loss(x, x - d, y, y).item(), abs=1e-12
    )
    with pytest.raises(ShapeError):
        generator_supervised_loss(x, x[:, :1], y, y)


def test_total_generator_loss_weights():
    assert total_generator_loss(-2.0, 0.3) == pytest.approx(-19.7, abs=1e-12)
    assert total_generator_loss(-2.0, 0.3, LossWeights(lambda_W=0)) == 0.3
    assert total_generator_loss(-2.0, 0.3, LossWeights(lambda_S=0)) == -20.0


@settings(max_examples=50, deadline=None)
@given(gw=st.floats(-100, 100), gs=st.floats(0, 10), a=st.floats(0, 50), b=st.floats(0, 50), c=st.floats(0, 4))
def test_total_generator_loss_linear_in_weights(gw, gs, a, b, c):
    # Scaling a weight scales its term exactly (the products are a single rounding each).
    one = total_generator_loss(gw, gs, LossWeights(lambda_W=a, lambda_S=b))
    assert one == a * gw + b * gs
    assert total_generator_loss(gw, gs, LossWeights(lambda_W=a, lambda_S=0)) == a * gw
    assert total_generator_loss(gw, gs, LossWeights(lambda_W=0, lambda_S=b)) == b * gs


def test_generator_loss_gradients_finite_difference():
    G, D_P, D_VGG, x, k, y = tiny_setup()
    psf = G.prepare_psf(k)

    def loss():
        x_bar = G(y, psf)
        y_bar = fft_convolve(x_bar, k)
        l_gw = generator_wasserstein_loss(D_P, D_VGG, x_bar, y_bar)
        l_gs = generator_supervised_loss(x, x_bar, y, y_bar)
        return total_generator_loss(l_gw, l_gs)

    assert finite_difference_agreement(G, loss, samples=300) >= 0.99


def test_weights_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(p_d=-1.0)
