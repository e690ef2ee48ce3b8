"""Dual-critic, physics-in-the-loop adversarial training.

Each iteration after warm-up performs one critic update followed by one
generator update.  Lensless inputs are synthesized from lensed images with
freshly shuffled PSFs, and the cycle image ``y_bar = F(G(y, k), k)`` always
comes from the differentiable forward model.

Output directory layout::

    <out>/config.json             full run config
    <out>/generator_spec.json     generator spec (travels with every checkpoint)
    <out>/train_log.jsonl         one record per logged iteration
    <out>/val_log.jsonl           one record per validation pass
    <out>/checkpoints/ckpt_<iter>.pt, latest.pt
    <out>/samples/val_<iter>.png  lensed | lensless | reconstruction contact sheets
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torchvision.utils import make_grid

from .config import RunConfig
from .data import DatasetManifest, LensedImages
from .discriminators import build_critic, critic_forward
from .errors import NumericalError
from .generators import PsfAwareGenerator, build_generator, generator_forward
from .io import load_psf, save_image
from .losses import (
    generator_supervised_loss,
    generator_wasserstein_loss,
    total_critic_loss,
    total_generator_loss,
)
from .metrics import EvalReport
from .physics import ConvPolicy, NoiseSpec, apply_forward, fft_convolve
from .psf import Permutation, PsfSectionGrid, fit_psf, random_permutation, shuffle_psf, split_sections

log = logging.getLogger(__name__)


def param_hash(module: nn.Module) -> str:
    """SHA-256 over all parameter bytes, used to prove a network was untouched."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def set_trainable(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class PsfSampler:
    """Draws PSF permutations and caches the fitted dense PSFs."""

    def __init__(self, grid: PsfSectionGrid, resolution: int, pool: Optional[List[Permutation]] = None):
        self.grid = grid
        self.resolution = resolution
        self.pool = pool
        self._cache: Dict[bytes, torch.Tensor] = {}

    @property
    def single(self) -> bool:
        return self.grid.n == 1

    def draw(self, n: int, rng: np.random.Generator) -> List[Permutation]:
        if self.single:
            return [Permutation.identity(1)] * n
        if self.pool:
            return [self.pool[i] for i in rng.integers(0, len(self.pool), size=n)]
        return [random_permutation(self.grid.n, rng) for _ in range(n)]

    def dense(self, perm: Permutation) -> torch.Tensor:
        key = perm.mapping.tobytes()
        k = self._cache.get(key)
        if k is None:
            k = fit_psf(shuffle_psf(self.grid, perm), self.resolution)[0]
            if self.pool is not None or self.single:
                self._cache[key] = k
        return k

    def batch(self, perms: Sequence[Permutation]) -> torch.Tensor:
        return torch.stack([self.dense(p) for p in perms])


def synthesize_batch(
    x: torch.Tensor,
    sampler: PsfSampler,
    rng: np.random.Generator,
    noise_sigma: float,
    noise_gen: Optional[torch.Generator],
    policy: ConvPolicy = ConvPolicy(),
    perms: Optional[Sequence[Permutation]] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, List[Permutation]]:
    """One shuffled PSF per image and the noisy lensless batch ``(x, k, y, perms)``."""
    if perms is None:
        perms = sampler.draw(x.shape[0], rng)
    k = sampler.batch(perms).to(x.dtype)
    y = apply_forward(x, k, NoiseSpec(noise_sigma), policy, generator=noise_gen)
    return x, k, y, list(perms)


@dataclass
class TrainingState:
    config: RunConfig
    G: PsfAwareGenerator
    D_P: nn.Module
    D_VGG: nn.Module
    opt_G: torch.optim.Optimizer
    opt_D: torch.optim.Optimizer
    sampler: PsfSampler
    seed_psf: np.ndarray
    rng_data: np.random.Generator
    rng_psf: np.random.Generator
    gen_noise: torch.Generator
    gen_alpha: torch.Generator
    val_perms: Dict[str, Optional[Permutation]]
    iteration: int = 0
    warmup_done: int = 0
    history: List[dict] = field(default_factory=list)
    train_images: Optional[LensedImages] = None
    val_images: Optional[LensedImages] = None

    @property
    def policy(self) -> ConvPolicy:
        return ConvPolicy(boundary=self.config.training.boundary)

    def forward_model(self, x_bar: torch.Tensor, k: torch.Tensor, noisy: bool = True) -> torch.Tensor:
        sigma = self.config.training.noise_sigma if noisy else 0.0
        return apply_forward(x_bar, k, NoiseSpec(sigma), self.policy, generator=self.gen_noise)

    def synthesize(self, x: torch.Tensor, perms=None):
        t = self.config.training
        return synthesize_batch(x, self.sampler, self.rng_psf, t.noise_sigma, self.gen_noise, self.policy, perms)

    def sample_lensed(self) -> torch.Tensor:
        n = self.config.training.batch_size
        idx = self.rng_data.integers(0, len(self.train_images), size=n)
        return self.train_images.batch(idx)


def _generator_seed(seed: int, stream: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1000 + stream)


def _choose_val_perms(grid: PsfSectionGrid, pool, seed: int) -> Dict[str, Optional[Permutation]]:
    if grid.n == 1:
        return {"seen": Permutation.identity(1), "unseen": None}
    rng = np.random.default_rng(seed + 7919)
    seen = pool[0] if pool else random_permutation(grid.n, rng)
    taken = set(pool or []) | {seen}
    unseen = random_permutation(grid.n, rng)
    while unseen in taken:
        unseen = random_permutation(grid.n, rng)
    return {"seen": seen, "unseen": unseen}


def init_state(
    config: RunConfig,
    seed_psf: Optional[np.ndarray] = None,
    train_images: Optional[LensedImages] = None,
    val_images: Optional[LensedImages] = None,
) -> TrainingState:
    """Build networks, optimizers, RNG streams and the PSF sampler for ``config``."""
    t = config.training
    if seed_psf is None:
        seed_psf = load_psf(config.data.seed_psf)
    torch.manual_seed(t.seed)
    G = build_generator(config.generator)
    D_P = build_critic(config.critic_patch)
    D_VGG = build_critic(config.critic_global)
    opt_G = torch.optim.Adam(G.parameters(), lr=t.lr_g, betas=t.betas)
    opt_D = torch.optim.Adam(list(D_P.parameters()) + list(D_VGG.parameters()), lr=t.lr_d, betas=t.betas)

    grid = split_sections(np.asarray(seed_psf), t.grid_rows, t.grid_cols)
    rng_psf = np.random.default_rng([t.seed, 1])
    pool = None
    if t.psf_pool_size and grid.n > 1:
        pool = []
        while len(pool) < t.psf_pool_size:
            p = random_permutation(grid.n, rng_psf)
            if p not in pool:
                pool.append(p)
    sampler = PsfSampler(grid, t.resolution, pool)
    return TrainingState(
        config=config, G=G, D_P=D_P, D_VGG=D_VGG, opt_G=opt_G, opt_D=opt_D,
        sampler=sampler, seed_psf=np.asarray(seed_psf),
        rng_data=np.random.default_rng([t.seed, 0]), rng_psf=rng_psf,
        gen_noise=_generator_seed(t.seed, 2), gen_alpha=_generator_seed(t.seed, 3),
        val_perms=_choose_val_perms(grid, pool, t.seed),
        train_images=train_images, val_images=val_images,
    )


def _check_finite(value: torch.Tensor, what: str, extra: dict) -> None:
    if not torch.isfinite(value):
        raise NumericalError(f"{what} is not finite: {json.dumps({k: float(v) for k, v in extra.items()})}")


def discriminator_step(state: TrainingState, x: torch.Tensor, batch=None) -> Dict[str, float]:
    """One critic update on ``L_D`` with the generator frozen.

    ``batch`` may supply a pre-synthesized ``(x, k, y)`` triple; otherwise PSFs
    and lensless images are drawn from the state's streams.
    """
    set_trainable(state.G, False)
    set_trainable(state.D_P, True)
    set_trainable(state.D_VGG, True)
    if batch is None:
        x, k, y, _ = state.synthesize(x)
    else:
        x, k, y = batch
    with torch.no_grad():
        x_bar = generator_forward(state.G, y, state.G.prepare_psf(k))
        y_bar = state.forward_model(x_bar, k)
    terms = total_critic_loss(
        lambda im: critic_forward(state.D_P, im),
        lambda im: critic_forward(state.D_VGG, im),
        x, y, x_bar, y_bar, state.config.training.weights, state.gen_alpha,
    )
    _check_finite(terms["total"], "critic loss", terms)
    state.opt_D.zero_grad(set_to_none=True)
    terms["total"].backward()
    state.opt_D.step()
    out = {name: float(v.detach()) for name, v in terms.items()}
    out["L_D"] = out.pop("total")
    return out


def generator_losses(state: TrainingState, x, k, y) -> Dict[str, torch.Tensor]:
    """``L_G`` and its parts on a given batch, all attached to the generator graph."""
    x_bar = generator_forward(state.G, y, state.G.prepare_psf(k))
    y_bar = state.forward_model(x_bar, k)
    l_gw = generator_wasserstein_loss(
        lambda im: critic_forward(state.D_P, im), lambda im: critic_forward(state.D_VGG, im), x_bar, y_bar
    )
    l_gs = generator_supervised_loss(x, x_bar, y, y_bar)
    return {"L_GW": l_gw, "L_GS": l_gs, "L_G": total_generator_loss(l_gw, l_gs, state.config.training.weights)}


def generator_step(state: TrainingState, x: torch.Tensor, batch=None) -> Dict[str, float]:
    """One generator update on ``L_G`` with both critics frozen.

    The lensless batch is re-synthesized for ``x`` with new PSFs and noise
    unless ``batch`` is given.
    """
    set_trainable(state.G, True)
    set_trainable(state.D_P, False)
    set_trainable(state.D_VGG, False)
    if batch is None:
        x, k, y, _ = state.synthesize(x)
    else:
        x, k, y = batch
    losses = generator_losses(state, x, k, y)
    _check_finite(losses["L_G"], "generator loss", losses)
    state.opt_G.zero_grad(set_to_none=True)
    losses["L_G"].backward()
    state.opt_G.step()
    set_trainable(state.D_P, True)
    set_trainable(state.D_VGG, True)
    return {name: float(v.detach()) for name, v in losses.items()}


def generator_path_gradients(state: TrainingState, x, k, y) -> Dict[str, torch.Tensor]:
    """Flattened generator gradients of the two adversarial paths taken separately.

    ``"global"`` is the gradient of ``-mean D_VGG(x_bar)``; ``"cycle"`` that of
    ``-mean D_P(F(x_bar, k))``.  Nothing is stepped.
    """
    set_trainable(state.G, True)
    params = [p for p in state.G.parameters()]
    out = {}
    for path in ("global", "cycle"):
        x_bar = generator_forward(state.G, y, state.G.prepare_psf(k))
        if path == "global":
            loss = -critic_forward(state.D_VGG, x_bar).mean()
        else:
            loss = -critic_forward(state.D_P, state.forward_model(x_bar, k, noisy=False)).mean()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        out[path] = torch.cat([
            (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
        ])
    return out


def _log(state: TrainingState, record: dict, log_file) -> None:
    state.history.append(record)
    if log_file is not None:
        log_file.write(json.dumps(record) + "\n")
        log_file.flush()


def warmup(state: TrainingState, iters: Optional[int] = None, log_file=None) -> None:
    """Critic-only updates with the generator frozen."""
    t = state.config.training
    iters = t.warmup_iters - state.warmup_done if iters is None else iters
    t0 = time.perf_counter()
    for _ in range(max(0, iters)):
        terms = discriminator_step(state, state.sample_lensed())
        state.warmup_done += 1
        if state.warmup_done % t.log_every == 0:
            _log(state, {"phase": "warmup", "iteration": state.warmup_done, **terms,
                         "wall": time.perf_counter() - t0}, log_file)


def train_iteration(state: TrainingState) -> Dict[str, float]:
    x = state.sample_lensed()
    d_terms = {}
    for _ in range(state.config.training.critic_steps):
        d_terms = discriminator_step(state, x)
    g_terms = generator_step(state, x)
    state.iteration += 1
    return {**d_terms, **g_terms}


# --------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def reconstruct(G: PsfAwareGenerator, y: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    squeeze = y.ndim == 3
    if squeeze:
        y = y[None]
    k = torch.as_tensor(k, dtype=y.dtype)
    while k.ndim < 4:
        k = k[None]
    if k.shape[0] != y.shape[0]:
        k = k.expand(y.shape[0], *k.shape[1:])
    out = generator_forward(G, y, G.prepare_psf(k))
    return out[0] if squeeze else out


@torch.no_grad()
def evaluate_generator(
    G: PsfAwareGenerator,
    images: torch.Tensor,
    k: torch.Tensor,
    noise_sigma: float,
    seed: int = 0,
    policy: ConvPolicy = ConvPolicy(),
    batch_size: int = 16,
) -> Dict[str, object]:
    """Reconstruct ``images`` through one PSF; report PSNR/SSIM and cycle residual.

    The cycle residual ``mean |F(G(y, k), k) - y|`` uses the noiseless operator.
    """
    gen = torch.Generator().manual_seed(seed)
    k = torch.as_tensor(k, dtype=images.dtype)
    while k.ndim < 4:
        k = k[None]
    recon_report, lensless_report = EvalReport(), EvalReport()
    residuals, recons, lensless = [], [], []
    for start in range(0, images.shape[0], batch_size):
        x = images[start : start + batch_size]
        kb = k.expand(x.shape[0], *k.shape[1:])
        y = apply_forward(x, kb, NoiseSpec(noise_sigma), policy, generator=gen)
        t0 = time.perf_counter()
        x_bar = generator_forward(G, y, G.prepare_psf(kb))
        dt = (time.perf_counter() - t0) / x.shape[0]
        residuals.append((fft_convolve(x_bar, kb, policy) - y).abs().mean(dim=(1, 2, 3)))
        for i in range(x.shape[0]):
            name = f"img{start + i:05d}"
            recon_report.add(name, x_bar[i], x[i], dt)
            lensless_report.add(name, y[i].clamp(0, 1), x[i])
        recons.append(x_bar)
        lensless.append(y)
    return {
        "report": recon_report,
        "lensless_report": lensless_report,
        "psnr": recon_report.mean_psnr,
        "ssim": recon_report.mean_ssim,
        "psnr_lensless": lensless_report.mean_psnr,
        "ssim_lensless": lensless_report.mean_ssim,
        "cycle_residual": float(torch.cat(residuals).mean()),
        "reconstructions": torch.cat(recons),
        "lensless": torch.cat(lensless),
    }


def validate(state: TrainingState, images: Optional[torch.Tensor] = None) -> Dict[str, object]:
    """Validation metrics for the seen and unseen held-out PSFs."""
    t = state.config.training
    if images is None:
        n = min(t.val_images, len(state.val_images))
        images = state.val_images.batch(range(n))
    out: Dict[str, object] = {"iteration": state.iteration, "warmup_done": state.warmup_done}
    for mode, perm in state.val_perms.items():
        if perm is None:
            continue
        res = evaluate_generator(state.G, images, state.sampler.dense(perm), t.noise_sigma,
                                 seed=t.seed + 17, policy=state.policy)
        for key in ("psnr", "ssim", "psnr_lensless", "ssim_lensless", "cycle_residual"):
            out[f"{mode}_{key}"] = res[key]
        out[f"_{mode}_images"] = (images, res["lensless"], res["reconstructions"])
    return out


def contact_sheet(lensed: torch.Tensor, lensless: torch.Tensor, recon: torch.Tensor, max_rows: int = 8) -> torch.Tensor:
    """Rows of ``lensed | lensless | reconstruction``."""
    n = min(max_rows, lensed.shape[0])
    tiles = []
    for i in range(n):
        tiles += [lensed[i], lensless[i].clamp(0, 1), recon[i]]
    return make_grid(torch.stack(tiles), nrow=3, padding=2, pad_value=1.0)


# --------------------------------------------------------------------------
# checkpoints


def _atomic_save(obj, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def state_dict(state: TrainingState) -> dict:
    return {
        "config": state.config.model_dump(mode="json"),
        "generator_spec": state.config.generator.model_dump(mode="json"),
        "G": state.G.state_dict(),
        "D_P": state.D_P.state_dict(),
        "D_VGG": state.D_VGG.state_dict(),
        "opt_G": state.opt_G.state_dict(),
        "opt_D": state.opt_D.state_dict(),
        "iteration": state.iteration,
        "warmup_done": state.warmup_done,
        "rng_data": state.rng_data.bit_generator.state,
        "rng_psf": state.rng_psf.bit_generator.state,
        "gen_noise": state.gen_noise.get_state(),
        "gen_alpha": state.gen_alpha.get_state(),
        "psf_pool": [p.to_list() for p in state.sampler.pool] if state.sampler.pool else None,
        "val_perms": {k: (v.to_list() if v is not None else None) for k, v in state.val_perms.items()},
        "seed_psf": state.seed_psf,
        "history": state.history,
    }


def save_checkpoint(state: TrainingState, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = state_dict(state)
    path = directory / f"ckpt_{state.iteration:07d}.pt"
    _atomic_save(payload, path)
    _atomic_save(payload, directory / "latest.pt")
    return path


def load_checkpoint(path: Union[str, Path], train_images=None, val_images=None) -> TrainingState:
    from .config import parse_run_config

    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    config = parse_run_config(ckpt["config"])
    state = init_state(config, ckpt["seed_psf"], train_images, val_images)
    state.G.load_state_dict(ckpt["G"])
    state.D_P.load_state_dict(ckpt["D_P"])
    state.D_VGG.load_state_dict(ckpt["D_VGG"])
    state.opt_G.load_state_dict(ckpt["opt_G"])
    state.opt_D.load_state_dict(ckpt["opt_D"])
    state.iteration = ckpt["iteration"]
    state.warmup_done = ckpt["warmup_done"]
    state.rng_data.bit_generator.state = ckpt["rng_data"]
    state.rng_psf.bit_generator.state = ckpt["rng_psf"]
    state.gen_noise.set_state(ckpt["gen_noise"])
    state.gen_alpha.set_state(ckpt["gen_alpha"])
    if ckpt["psf_pool"]:
        state.sampler.pool = [Permutation(np.array(p)) for p in ckpt["psf_pool"]]
    state.val_perms = {k: (Permutation(np.array(v)) if v is not None else None) for k, v in ckpt["val_perms"].items()}
    state.history = list(ckpt["history"])
    return state


def load_generator(path: Union[str, Path]) -> Tuple[PsfAwareGenerator, dict]:
    """Generator and the raw checkpoint payload (for config and PSF metadata)."""
    from .config import GeneratorSpec

    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    G = build_generator(GeneratorSpec.model_validate(ckpt["generator_spec"]))
    G.load_state_dict(ckpt["G"])
    G.eval()
    return G, ckpt


# --------------------------------------------------------------------------
# driver


def _trim_log(path: Path, state: TrainingState) -> None:
    if not path.is_file():
        return
    keep = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        limit = state.warmup_done if rec.get("phase") == "warmup" else state.iteration
        if rec.get("iteration", 0) <= limit:
            keep.append(line)
    path.write_text("".join(l + "\n" for l in keep))


def _val_record(v: dict) -> dict:
    return {k: val for k, val in v.items() if not k.startswith("_")}


def train(
    config: RunConfig,
    out_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
    max_iters: Optional[int] = None,
    progress: Optional[Callable[[TrainingState, dict], None]] = None,
) -> TrainingState:
    """Run warm-up and the alternating loop, writing logs, samples and checkpoints.

    ``max_iters`` stops early (after that many loop iterations in this call),
    which simulates an interruption for resume tests.
    """
    t = config.training
    out = Path(out_dir or config.output_dir)
    ckpt_dir = out / "checkpoints"
    (out / "samples").mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest.load(config.data.manifest)
    channels = config.generator.in_channels
    train_images = LensedImages(manifest, "train", t.resolution, channels)
    val_images = LensedImages(manifest, "val", t.resolution, channels)

    latest = ckpt_dir / "latest.pt"
    if resume and latest.is_file():
        state = load_checkpoint(latest, train_images, val_images)
        log.info("resumed at warmup %d, iteration %d", state.warmup_done, state.iteration)
    else:
        state = init_state(config, None, train_images, val_images)
    config.dump(out / "config.json")
    (out / "generator_spec.json").write_text(json.dumps(config.generator.model_dump(mode="json"), indent=2))

    train_log, val_log = out / "train_log.jsonl", out / "val_log.jsonl"
    if resume:
        _trim_log(train_log, state)
        _trim_log(val_log, state)
    else:
        for p in (train_log, val_log):
            p.unlink(missing_ok=True)

    steps_done = 0
    with open(train_log, "a") as lf, open(val_log, "a") as vf:
        if state.warmup_done < t.warmup_iters:
            warmup(state, log_file=lf)
            v = validate(state)
            v["phase"] = "post_warmup"
            vf.write(json.dumps(_val_record(v)) + "\n")
            vf.flush()
            save_checkpoint(state, ckpt_dir)
        t0 = time.perf_counter()
        while state.iteration < t.total_iters:
            if max_iters is not None and steps_done >= max_iters:
                break
            terms = train_iteration(state)
            steps_done += 1
            if state.iteration % t.log_every == 0:
                _log(state, {"phase": "train", "iteration": state.iteration, **terms,
                             "wall": time.perf_counter() - t0}, lf)
            if state.iteration % t.val_every == 0 or state.iteration == t.total_iters:
                v = validate(state)
                v["phase"] = "train"
                vf.write(json.dumps(_val_record(v)) + "\n")
                vf.flush()
                lensed, lensless, recon = v["_seen_images"]
                save_image(out / "samples" / f"val_{state.iteration:07d}.png", contact_sheet(lensed, lensless, recon))
                if progress is not None:
                    progress(state, v)
            if state.iteration % t.checkpoint_every == 0 or state.iteration == t.total_iters:
                save_checkpoint(state, ckpt_dir)
    if steps_done and state.iteration % t.checkpoint_every:
        save_checkpoint(state, ckpt_dir)
    return state
