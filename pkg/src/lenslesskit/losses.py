"""Critic and generator objectives (Wasserstein with gradient penalty).

Critics are any callables mapping an image batch to per-sample scores
``(N,)``.  Lensless-domain terms use the patch critic ``D_P``, lensed-domain
terms the global critic ``D_VGG``.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional

import torch

from .config import LossWeights
from .errors import GraphBreakError, ShapeError

Critic = Callable[[torch.Tensor], torch.Tensor]

CRITIC_TERMS = ("real_P", "real_VGG", "fake_P", "fake_VGG", "mix_P", "mix_VGG")


def critic_loss_real(D: Critic, reals: torch.Tensor, p_d: float) -> torch.Tensor:
    """``-mean(D(real)) + p_d * mean(D(real)^2)``; the drift term only touches reals."""
    s = D(reals)
    return -s.mean() + p_d * (s ** 2).mean()


def critic_loss_fake(D: Critic, fakes: torch.Tensor) -> torch.Tensor:
    return D(fakes).mean()


def sample_alpha(n: int, like: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """One mixing coefficient per batch element, shaped to broadcast over ``like``."""
    alpha = torch.rand(n, generator=generator, dtype=like.dtype, device=like.device)
    return alpha.view(n, *([1] * (like.ndim - 1)))


def gradient_penalty(
    D: Critic,
    reals: torch.Tensor,
    fakes: torch.Tensor,
    p_r: float,
    generator: Optional[torch.Generator] = None,
    alpha: Optional[torch.Tensor] = None,
    seed: Optional[int] = None,
) -> torch.Tensor:
    """``p_r * mean_i (||grad D(mix_i)||_2 - 1)^2`` on ``mix = a*fake + (1-a)*real``.

    ``alpha`` overrides the random draw (scalar or per-sample); otherwise it is
    sampled from ``generator`` or, failing that, from a generator seeded with
    ``seed``.
    """
    if reals.shape != fakes.shape:
        raise ShapeError(f"reals {tuple(reals.shape)} and fakes {tuple(fakes.shape)} differ")
    n = reals.shape[0]
    if alpha is None:
        if generator is None and seed is not None:
            generator = torch.Generator(device=reals.device).manual_seed(seed)
        alpha = sample_alpha(n, reals, generator)
    else:
        alpha = torch.as_tensor(alpha, dtype=reals.dtype, device=reals.device)
        if alpha.ndim == 1:
            alpha = alpha.view(n, *([1] * (reals.ndim - 1)))
    mix = (alpha * fakes.detach() + (1 - alpha) * reals.detach()).requires_grad_(True)
    out = D(mix)
    (grad,) = torch.autograd.grad(out.sum(), mix, create_graph=True, allow_unused=True)
    if grad is None:
        raise GraphBreakError("critic output does not depend on its input; gradient penalty undefined")
    norms = grad.reshape(n, -1).norm(2, dim=1)
    return p_r * ((norms - 1) ** 2).mean()


def total_critic_loss(
    D_P: Critic,
    D_VGG: Critic,
    x: torch.Tensor,
    y: torch.Tensor,
    x_bar: torch.Tensor,
    y_bar: torch.Tensor,
    weights: LossWeights = LossWeights(),
    generator: Optional[torch.Generator] = None,
) -> Dict[str, torch.Tensor]:
    """All six critic terms plus their sum under ``"total"``."""
    x_bar, y_bar = x_bar.detach(), y_bar.detach()
    terms = {
        "real_P": critic_loss_real(D_P, y, weights.p_d),
        "real_VGG": critic_loss_real(D_VGG, x, weights.p_d),
        "fake_P": critic_loss_fake(D_P, y_bar),
        "fake_VGG": critic_loss_fake(D_VGG, x_bar),
        "mix_P": gradient_penalty(D_P, y, y_bar, weights.p_r, generator),
        "mix_VGG": gradient_penalty(D_VGG, x, x_bar, weights.p_r, generator),
    }
    terms["total"] = sum(terms[t] for t in CRITIC_TERMS)
    return terms


def _require_graph(t: torch.Tensor, name: str) -> None:
    if not t.requires_grad:
        raise GraphBreakError(f"{name} is detached from the generator graph")


def generator_wasserstein_loss(D_P: Critic, D_VGG: Critic, x_bar: torch.Tensor, y_bar: torch.Tensor) -> torch.Tensor:
    """``-mean(D_P(y_bar)) - mean(D_VGG(x_bar))``.

    Both inputs must still be attached to the generator graph; ``y_bar`` in
    particular must come through the differentiable forward model.
    """
    _require_graph(x_bar, "x_bar")
    _require_graph(y_bar, "y_bar")
    return -D_P(y_bar).mean() - D_VGG(x_bar).mean()


def generator_supervised_loss(x, x_bar, y, y_bar) -> torch.Tensor:
    """Paired L1 in the lensed domain plus L1 cycle consistency in the lensless domain."""
    if x.shape != x_bar.shape or y.shape != y_bar.shape:
        raise ShapeError("supervised loss operands differ in shape")
    return (x - x_bar).abs().mean() + (y - y_bar).abs().mean()


def total_generator_loss(l_gw, l_gs, weights: LossWeights = LossWeights()):
    return weights.lambda_W * l_gw + weights.lambda_S * l_gs
