"""Lensless image formation: ``y = k * x + noise`` evaluated with FFTs.

Images are channel-first tensors ``(..., C, H, W)``; a PSF is a single-channel
grid ``(..., H_k, W_k)`` broadcast over the channel axis, so the same PSF blurs
every colour plane.  The PSF origin is the array centre ``(H_k // 2, W_k // 2)``,
which makes a centred delta the identity operator.

Every function accepts either ``torch.Tensor`` or ``numpy.ndarray`` inputs and
returns the same kind it was given.  The torch path is differentiable, which the
training loop relies on to push gradients through the forward model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegeneratePSFError, ShapeError

Boundary = Literal["circular", "linear"]
Crop = Literal["same", "full"]


@dataclass(frozen=True)
class ConvPolicy:
    """Boundary handling for the convolution.

    ``boundary="circular"`` is the plain FFT product; ``"linear"`` zero-pads to
    at least ``H + H_k - 1`` per axis.  ``output_crop="full"`` is only meaningful
    for linear convolution.  ``fft_size`` forces the padded FFT grid of the
    linear mode (mostly useful for testing the size check).
    """

    boundary: Boundary = "circular"
    output_crop: Crop = "same"
    fft_size: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.boundary not in ("circular", "linear"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.output_crop not in ("same", "full"):
            raise ValueError(f"unknown output_crop {self.output_crop!r}")
        if self.boundary == "circular" and self.output_crop == "full":
            raise ValueError("circular convolution has no 'full' output")


CIRCULAR = ConvPolicy()
LINEAR = ConvPolicy(boundary="linear")


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian read-out noise; ``sigma`` is in image-intensity units."""

    sigma: float = 0.01
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


def _as_tensor(a):
    if isinstance(a, torch.Tensor):
        return a, False
    return torch.as_tensor(np.asarray(a)), True


def _back(t: torch.Tensor, to_numpy: bool):
    return t.detach().cpu().numpy() if to_numpy else t


def check_image(x) -> None:
    """Raise if ``x`` is not a finite ``(..., C, H, W)`` image with C in {1, 3}."""
    shape = tuple(x.shape)
    if len(shape) < 3 or shape[-3] not in (1, 3) or shape[-1] < 1 or shape[-2] < 1:
        raise ShapeError(f"expected (..., C, H, W) with C in {{1, 3}}, got {shape}")
    finite = torch.isfinite(x).all() if isinstance(x, torch.Tensor) else np.isfinite(x).all()
    if not bool(finite):
        raise ValueError("image contains NaN or Inf")


def psf_normalize(k):
    """Scale ``k`` so that each PSF in the batch sums to one."""
    k_t, to_np = _as_tensor(k)
    if (k_t < 0).any():
        raise ValueError("PSF entries must be nonnegative")
    total = k_t.sum(dim=(-2, -1), keepdim=True)
    if (total <= 0).any():
        raise DegeneratePSFError("degenerate PSF: no positive entry to normalize")
    return _back(k_t / total, to_np)


def _match_dtype(x: torch.Tensor, k: torch.Tensor):
    dtype = torch.promote_types(x.dtype, k.dtype)
    if not dtype.is_floating_point:
        dtype = torch.get_default_dtype()
    return x.to(dtype), k.to(dtype=dtype, device=x.device)


def _centered_canvas(k: torch.Tensor, shape: Tuple[int, int]) -> torch.Tensor:
    """Embed ``k`` in an ``shape`` grid with its centre moved to index (0, 0)."""
    hk, wk = k.shape[-2:]
    h, w = shape
    canvas = F.pad(k, (0, w - wk, 0, h - hk))
    return torch.roll(canvas, shifts=(-(hk // 2), -(wk // 2)), dims=(-2, -1))


def fft_convolve(x, k, policy: ConvPolicy = CIRCULAR):
    """Convolve each channel of ``x`` with ``k`` via ``ifft(fft(x) * fft(k))``.

    ``x`` is ``(..., C, H, W)`` (or a bare ``(H, W)`` grid) and ``k`` is
    ``(H_k, W_k)`` or ``(..., 1, H_k, W_k)`` broadcastable against ``x``.
    """
    x_t, to_np = _as_tensor(x)
    k_t, _ = _as_tensor(k)
    x_t, k_t = _match_dtype(x_t, k_t)
    h, w = x_t.shape[-2:]
    hk, wk = k_t.shape[-2:]

    if policy.boundary == "circular":
        if hk > h or wk > w:
            raise ShapeError(f"PSF {hk}x{wk} larger than image {h}x{w} under circular boundary")
        otf = torch.fft.rfft2(_centered_canvas(k_t, (h, w)))
        y = torch.fft.irfft2(torch.fft.rfft2(x_t) * otf, s=(h, w))
        return _back(y, to_np)

    full_h, full_w = h + hk - 1, w + wk - 1
    ph, pw = policy.fft_size or (full_h, full_w)
    if ph < full_h or pw < full_w:
        raise ShapeError(
            f"padded FFT size {ph}x{pw} smaller than linear support {full_h}x{full_w}"
        )
    spec = torch.fft.rfft2(x_t, s=(ph, pw)) * torch.fft.rfft2(k_t, s=(ph, pw))
    full = torch.fft.irfft2(spec, s=(ph, pw))
    if policy.output_crop == "full":
        y = full[..., :full_h, :full_w]
    else:
        y = full[..., hk // 2 : hk // 2 + h, wk // 2 : wk // 2 + w]
    return _back(y, to_np)


def direct_convolve(x, k, policy: ConvPolicy = CIRCULAR) -> np.ndarray:
    """Spatial-domain reference convolution (numpy, small inputs only).

    Evaluates ``y[i, j] = sum_{m, n} k[m, n] * x[i - m + cm, j - n + cn]`` tap by
    tap with explicit index arithmetic, where ``(cm, cn)`` is the PSF centre.
    Pixels outside the image wrap (circular) or read as zero (linear).
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2:
        raise ShapeError("direct_convolve takes a single 2-D PSF")
    h, w = x.shape[-2:]
    hk, wk = k.shape
    cm, cn = hk // 2, wk // 2

    if policy.boundary == "circular":
        if hk > h or wk > w:
            raise ShapeError(f"PSF {hk}x{wk} larger than image {h}x{w} under circular boundary")
        y = np.zeros_like(x)
        rows, cols = np.arange(h), np.arange(w)
        for m in range(hk):
            src_r = (rows - m + cm) % h
            for n in range(wk):
                if k[m, n] == 0:
                    continue
                src_c = (cols - n + cn) % w
                y += k[m, n] * x[..., src_r[:, None], src_c[None, :]]
        return y

    if policy.output_crop == "full":
        out_h, out_w, off_r, off_c = h + hk - 1, w + wk - 1, 0, 0
    else:
        out_h, out_w, off_r, off_c = h, w, cm, cn
    y = np.zeros(x.shape[:-2] + (out_h, out_w))
    for i in range(out_h):
        for m in range(hk):
            r = i + off_r - m
            if not 0 <= r < h:
                continue
            for n in range(wk):
                if k[m, n] == 0:
                    continue
                # Output columns j with 0 <= j + off_c - n < w.
                j0 = max(0, n - off_c)
                j1 = min(out_w, w + n - off_c)
                if j0 >= j1:
                    continue
                y[..., i, j0:j1] += k[m, n] * x[..., r, j0 + off_c - n : j1 + off_c - n]
    return y


def spatial_convolve(x, k, policy: ConvPolicy = CIRCULAR):
    """Same operator as :func:`fft_convolve` computed with ``torch.conv2d``.

    This is the dense spatial path the FFT route is benchmarked against.
    ``k`` is either one ``(H_k, W_k)`` PSF or one PSF per batch element
    ``(N, 1, H_k, W_k)``.
    """
    x_t, to_np = _as_tensor(x)
    k_t, _ = _as_tensor(k)
    x_t, k_t = _match_dtype(x_t, k_t)
    squeeze = x_t.ndim == 3
    if squeeze:
        x_t = x_t.unsqueeze(0)
    n, c, h, w = x_t.shape
    hk, wk = k_t.shape[-2:]
    if policy.output_crop == "full":
        raise ValueError("spatial_convolve only produces same-size output")
    pads = (wk - 1 - wk // 2, wk // 2, hk - 1 - hk // 2, hk // 2)
    mode = "circular" if policy.boundary == "circular" else "constant"
    if mode == "circular" and (hk > h or wk > w):
        raise ShapeError(f"PSF {hk}x{wk} larger than image {h}x{w} under circular boundary")
    weight = torch.flip(k_t, dims=(-2, -1))
    if weight.ndim == 2:
        xp = F.pad(x_t.reshape(n * c, 1, h, w), pads, mode=mode)
        y = F.conv2d(xp, weight[None, None]).reshape(n, c, h, w)
    else:
        weight = weight.reshape(n, 1, hk, wk).repeat_interleave(c, dim=0)
        xp = F.pad(x_t.reshape(1, n * c, h, w), pads, mode=mode)
        y = F.conv2d(xp, weight, groups=n * c).reshape(n, c, h, w)
    if squeeze:
        y = y[0]
    return _back(y, to_np)


def apply_forward(
    x,
    k,
    noise: NoiseSpec = NoiseSpec(),
    policy: ConvPolicy = CIRCULAR,
    clip: bool = False,
    generator: Optional[torch.Generator] = None,
):
    """Simulate a lensless measurement ``fft_convolve(x, k) + N(0, sigma^2)``.

    Noise comes from ``generator`` when given, otherwise from a fresh generator
    seeded with ``noise.seed`` (nondeterministic if the seed is None).  Outputs
    are left unclipped unless ``clip`` is set, which is meant for export only.
    """
    x_t, to_np = _as_tensor(x)
    y = fft_convolve(x_t, k, policy)
    if noise.sigma > 0:
        if generator is None:
            generator = torch.Generator(device=y.device)
            if noise.seed is None:
                generator.seed()
            else:
                generator.manual_seed(noise.seed)
        eta = torch.randn(y.shape, generator=generator, dtype=y.dtype, device=y.device)
        y = y + noise.sigma * eta
    if clip:
        y = y.clamp(0.0, 1.0)
    return _back(y, to_np)
