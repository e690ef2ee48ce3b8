"""PSF-aware generators mapping a lensless image and its PSF to a lensed image.

Two layouts are provided:

* ``YNet``: one CNN encoder/decoder with skip connections; PSF features from
  the auxiliary branch are fused at the bottleneck.
* ``TUNet``: stage 1 is an encoder + PSF branch + decoder without skips that
  produces an intermediate lensed image; stage 2 is a U-Net restoring it.

The PSF branch is either a sparse encoder (scatter-add densification followed
by five convolutions) or an unfold encoder (contiguous tiles stacked as
channels, one convolution).
"""

from __future__ import annotations

from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GeneratorSpec
from .errors import NumericalError, ShapeError
from .psf import densify_batch, fit_psf, sparsify_batch, unfold_batch


class SparseBatch(NamedTuple):
    coords: torch.Tensor  # (N, P, 2) long
    values: torch.Tensor  # (N, P)


PsfInput = Union[SparseBatch, torch.Tensor]


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.Identity()


class ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, stride=1, norm="instance", slope=0.2, kernel_size=3):
        super().__init__(
            nn.Conv2d(c_in, c_out, kernel_size, stride=stride, padding=kernel_size // 2),
            _norm(norm, c_out),
            nn.LeakyReLU(slope),
        )


class Encoder(nn.Module):
    """Stem plus ``depth`` stride-2 stages doubling the width each time.

    The stem is never normalized: per-image normalization there would discard
    the absolute brightness and colour that the full-resolution skip carries
    to the output.
    """

    def __init__(self, c_in, base, depth, norm="instance", slope=0.2):
        super().__init__()
        self.stem = ConvBlock(c_in, base, norm="none", slope=slope)
        self.stages = nn.ModuleList()
        c = base
        for _ in range(depth):
            self.stages.append(
                nn.Sequential(
                    ConvBlock(c, 2 * c, stride=2, norm=norm, slope=slope),
                    ConvBlock(2 * c, 2 * c, norm=norm, slope=slope),
                )
            )
            c *= 2
        self.out_channels = c

    def forward(self, x) -> List[torch.Tensor]:
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


class Decoder(nn.Module):
    """Bilinear upsampling followed by two conv blocks per stage.

    The outermost stage is left unnormalized, like the stem.
    """

    def __init__(self, base, depth, c_out, skips: Sequence[bool], norm="instance", slope=0.2):
        super().__init__()
        self.skips = list(skips)
        self.stages = nn.ModuleList()
        c = base * 2 ** depth
        for level in reversed(range(depth)):
            c_next = base * 2 ** level
            c_in = c + (c_next if self.skips[level] else 0)
            stage_norm = "none" if level == 0 else norm
            self.stages.append(
                nn.Sequential(
                    ConvBlock(c_in, c_next, norm=stage_norm, slope=slope),
                    ConvBlock(c_next, c_next, norm=stage_norm, slope=slope),
                )
            )
            c = c_next
        self.head = nn.Conv2d(base, c_out, 1)

    def forward(self, h, feats: Optional[List[torch.Tensor]] = None):
        depth = len(self.stages)
        for i, stage in enumerate(self.stages):
            level = depth - 1 - i
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            if self.skips[level]:
                h = torch.cat([h, feats[level]], dim=1)
            h = stage(h)
        return torch.sigmoid(self.head(h))


class SparsePsfEncoder(nn.Module):
    """Densify the coordinate list by scatter-add, then run the conv stack.

    The first ``depth`` layers stride by two so the output lands on the
    generator bottleneck grid.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.shape = (spec.input_resolution, spec.input_resolution)
        layers = []
        c = 1
        for i, width in enumerate(spec.psf_widths):
            stride = 2 if i < spec.depth else 1
            layers.append(ConvBlock(c, width, stride=stride, norm=spec.norm, slope=spec.leaky_slope))
            c = width
        self.layers = nn.Sequential(*layers)
        self.out_channels = c

    def forward(self, s: SparseBatch):
        return self.forward_dense(densify_batch(s.coords, s.values, self.shape))

    def forward_dense(self, grid: torch.Tensor):
        return self.layers(grid)


class UnfoldPsfEncoder(nn.Module):
    """One convolution over the tile stack ``(N, T, t, t)``."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        width = spec.psf_widths[-1]
        self.tile_count = spec.tile_count
        self.layers = ConvBlock(spec.tile_count, width, norm=spec.norm, slope=spec.leaky_slope)
        self.out_channels = width

    def forward(self, tiles: torch.Tensor):
        if tiles.shape[1] != self.tile_count:
            raise ShapeError(f"expected {self.tile_count} tiles, got {tiles.shape[1]}")
        return self.layers(tiles)


class Fusion(nn.Module):
    """Channel concatenation followed by a 1x1 convolution."""

    def __init__(self, c_img, c_psf, c_out, slope=0.2):
        super().__init__()
        self.proj = nn.Conv2d(c_img + c_psf, c_out, 1)
        self.act = nn.LeakyReLU(slope)

    def forward(self, h, p):
        if h.shape[-2:] != p.shape[-2:]:
            raise ShapeError(f"fusion shape mismatch: image {tuple(h.shape)} vs PSF {tuple(p.shape)}")
        return self.act(self.proj(torch.cat([h, p], dim=1)))


def _psf_encoder(spec: GeneratorSpec) -> nn.Module:
    return SparsePsfEncoder(spec) if spec.psf_branch == "sparse" else UnfoldPsfEncoder(spec)


class PsfAwareGenerator(nn.Module):
    """Shared input handling; subclasses implement ``forward_stages``."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec

    def prepare_psf(self, k) -> PsfInput:
        """Convert a dense PSF batch ``(N, 1, h, w)`` into this generator's PSF input.

        The PSF is fitted to the input resolution and rescaled to unit peak so
        the branch sees O(1) values.
        """
        dtype = next(self.parameters()).dtype
        k = fit_psf(k, self.spec.input_resolution).to(dtype)
        k = k / k.amax(dim=(-2, -1), keepdim=True)
        if self.spec.psf_branch == "sparse":
            coords, values = sparsify_batch(k, self.spec.pad_length, self.spec.psf_threshold_frac)
            return SparseBatch(coords, values)
        return unfold_batch(k, self.spec.tile_size)

    def forward(self, y, psf: PsfInput):
        return self.forward_stages(y, psf)[-1]

    def forward_stages(self, y, psf: PsfInput) -> Tuple[torch.Tensor, ...]:
        raise NotImplementedError


class YNet(PsfAwareGenerator):
    def __init__(self, spec: GeneratorSpec):
        super().__init__(spec)
        b, d, norm, slope = spec.base_channels, spec.depth, spec.norm, spec.leaky_slope
        self.encoder = Encoder(spec.in_channels, b, d, norm, slope)
        self.psf_encoder = _psf_encoder(spec)
        self.fusion = Fusion(self.encoder.out_channels, self.psf_encoder.out_channels, spec.bottleneck_channels, slope)
        self.decoder = Decoder(b, d, spec.in_channels, spec.skips, norm, slope)

    def forward_stages(self, y, psf):
        feats = self.encoder(y)
        h = self.fusion(feats[-1], self.psf_encoder(psf))
        return (self.decoder(h, feats),)


class UNet(nn.Module):
    def __init__(self, c_in, base, depth, norm="instance", slope=0.2):
        super().__init__()
        self.encoder = Encoder(c_in, base, depth, norm, slope)
        self.decoder = Decoder(base, depth, c_in, [True] * depth, norm, slope)

    def forward(self, x):
        feats = self.encoder(x)
        return self.decoder(feats[-1], feats)


class TUNet(PsfAwareGenerator):
    def __init__(self, spec: GeneratorSpec):
        super().__init__(spec)
        b, d, norm, slope = spec.base_channels, spec.depth, spec.norm, spec.leaky_slope
        self.encoder = Encoder(spec.in_channels, b, d, norm, slope)
        self.psf_encoder = _psf_encoder(spec)
        self.fusion = Fusion(self.encoder.out_channels, self.psf_encoder.out_channels, spec.bottleneck_channels, slope)
        self.decoder = Decoder(b, d, spec.in_channels, [False] * d, norm, slope)
        self.stage2 = UNet(
            spec.in_channels, spec.stage2_base_channels or b, spec.stage2_depth or d, norm, slope
        )

    def stage1_modules(self) -> List[nn.Module]:
        return [self.encoder, self.psf_encoder, self.fusion, self.decoder]

    def forward_stages(self, y, psf):
        h = self.fusion(self.encoder(y)[-1], self.psf_encoder(psf))
        intermediate = self.decoder(h)
        return intermediate, self.stage2(intermediate)


def build_generator(spec: GeneratorSpec) -> PsfAwareGenerator:
    return YNet(spec) if spec.variant == "Y" else TUNet(spec)


def count_parameters(modules: Union[nn.Module, Sequence[nn.Module]]) -> int:
    if isinstance(modules, nn.Module):
        modules = [modules]
    return sum(p.numel() for m in modules for p in m.parameters())


def generator_forward(G: PsfAwareGenerator, y: torch.Tensor, psf: PsfInput) -> torch.Tensor:
    """Run ``G(y, k)`` and abort with a diagnostic if the output is not finite."""
    out = G(y, psf)
    if not torch.isfinite(out).all():
        bad = (~torch.isfinite(out)).sum().item()
        raise NumericalError(f"generator produced {bad} non-finite values (input |y|max={y.abs().max():.3g})")
    return out
