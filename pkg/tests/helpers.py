"""Shared test utilities."""

from typing import Callable

import numpy as np
import torch
import torch.nn as nn


def finite_difference_agreement(
    modules,
    loss_fn: Callable[[], torch.Tensor],
    samples: int = 300,
    eps: float = 1e-6,
    rtol: float = 1e-3,
    atol: float = 1e-8,
    seed: int = 0,
) -> float:
    """Fraction of sampled parameter coordinates whose autograd gradient matches
    a central finite difference.

    A coordinate agrees when ``|fd - g| <= rtol * max(|fd|, |g|) + atol``; the
    small absolute floor only matters for gradients that are zero to within
    double-precision round-off.  Run on float64 modules.
    """
    if isinstance(modules, nn.Module):
        modules = [modules]
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.detach().clone() for p in params]

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(sizes.sum(), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    ok = 0
    for f in flat_idx:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        j = int(f - offsets[i])
        p = params[i].data.view(-1)
        orig = p[j].item()
        # Parameters are nudged through .data; the loss itself is evaluated with
        # autograd enabled because some losses differentiate internally.
        p[j] = orig + eps
        up = loss_fn().item()
        p[j] = orig - eps
        down = loss_fn().item()
        p[j] = orig
        fd = (up - down) / (2 * eps)
        g = grads[i].view(-1)[j].item()
        if abs(fd - g) <= rtol * max(abs(fd), abs(g)) + atol:
            ok += 1
    return ok / len(flat_idx)


def linear_critic() -> nn.Module:
    """D(x) = sum of all entries, per batch element."""

    class Sum(nn.Module):
        def forward(self, x):
            return x.flatten(1).sum(dim=1)

    return Sum()


def constant_critic(value: float) -> nn.Module:
    class Const(nn.Module):
        def __init__(self):
            super().__init__()
            self.scale = nn.Parameter(torch.zeros(()))

        def forward(self, x):
            # Depends on x with zero weight so autograd still sees a graph.
            return value + self.scale * x.flatten(1).sum(dim=1) * 0.0

    return Const()


def tiny_setup(seed: int = 0, n: int = 2, size: int = 16):
    """Float64 tiny Y-Net, both critics and one synthesized batch ``(x, k, y)``."""
    from lenslesskit.config import CriticSpec, GeneratorSpec
    from lenslesskit.discriminators import build_critic
    from lenslesskit.generators import build_generator
    from lenslesskit.physics import NoiseSpec, apply_forward
    from lenslesskit.psf import caustic_psf, fit_psf, random_permutation, shuffle_psf, split_sections

    torch.manual_seed(seed)
    spec = GeneratorSpec(
        base_channels=4, depth=2, input_resolution=size, psf_channels=[4, 4, 4, 4, 4], psf_pad_fraction=1.0
    )
    G = build_generator(spec).double()
    D_P = build_critic(CriticSpec(kind="patch", patch_layers=2, patch_base_channels=4)).double()
    D_VGG = build_critic(
        CriticSpec(kind="global", backbone="vgg:4,M,8", truncation=0, pretrained=False, allow_random_init=True)
    ).double()
    rng = np.random.default_rng(seed)
    grid = split_sections(caustic_psf(size * 2, seed), 5, 5)
    k = torch.cat([fit_psf(shuffle_psf(grid, random_permutation(25, rng)), size) for _ in range(n)]).double()
    x = torch.rand(n, 3, size, size, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    y = apply_forward(x, k, NoiseSpec(0.01, seed=seed))
    return G, D_P, D_VGG, x, k, y


def toy_corpus(root, count: int = 20, size: int = 32, seed: int = 0, psf_size: int = 16):
    """Procedural corpus, manifest and seed PSF under ``root``.

    Returns ``(manifest_path, seed_psf_path)``.
    """
    from pathlib import Path

    from lenslesskit.data import ingest, write_scene_corpus
    from lenslesskit.io import save_psf
    from lenslesskit.psf import caustic_psf

    root = Path(root)
    write_scene_corpus(root / "scenes", count, size=size, seed=seed)
    manifest = ingest(root / "scenes", seed=seed).save(root / "manifest.json")
    psf = save_psf(root / "seed.psf", caustic_psf(psf_size, seed))
    return Path(manifest), psf


def toy_state(root, **training):
    """A small 32x32 training state over :func:`toy_corpus`."""
    from pathlib import Path

    from lenslesskit.config import RunConfig
    from lenslesskit.data import DatasetManifest, LensedImages
    from lenslesskit.training import init_state

    root = Path(root)
    manifest, psf = toy_corpus(root)
    opts = dict(resolution=32, batch_size=4, warmup_iters=5, total_iters=10, val_images=4)
    opts.update(training)
    cfg = RunConfig.toy(str(manifest), str(psf), output_dir=str(root / "run"), **opts)
    m = DatasetManifest.load(manifest)
    return init_state(cfg, None, LensedImages(m, "train", 32), LensedImages(m, "val", 32))
