"""PSF family generation and the auxiliary PSF encodings fed to generators.

A seed PSF is cut into an ``rows x cols`` grid of equal sections and the
sections are re-arranged by a permutation to produce new caustic patterns.
Two alternative encodings of a PSF are provided for the generator's PSF
branch: a padded coordinate list (``sparsify``/``densify``) and a stack of
contiguous tiles (``unfold_psf``).

Numpy functions act on single PSFs; the ``*_batch`` variants operate on torch
batches ``(N, 1, H, W)`` inside the network input pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import PadOverflowError, ShapeError
from .physics import psf_normalize

DEFAULT_THRESHOLD_FRAC = 0.01
DEFAULT_PAD_FRAC = 0.25

SeedLike = Union[int, np.random.Generator, None]


@dataclass(frozen=True)
class Permutation:
    """Bijection on section indices; slot ``i`` receives section ``mapping[i]``.

    Indices are 0-based.
    """

    mapping: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        mapping = np.asarray(self.mapping, dtype=np.int64)
        if mapping.ndim != 1 or not np.array_equal(np.sort(mapping), np.arange(mapping.size)):
            raise ValueError(f"not a permutation: {mapping.tolist()}")
        object.__setattr__(self, "mapping", mapping)

    @property
    def n(self) -> int:
        return int(self.mapping.size)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.mapping, np.arange(self.n)))

    def to_list(self) -> list:
        return self.mapping.tolist()

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(self.mapping, other.mapping)

    def __hash__(self):
        return hash(self.mapping.tobytes())


@dataclass
class PsfSectionGrid:
    rows: int
    cols: int
    sections: np.ndarray  # (rows * cols, section_h, section_w), row-major

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> Tuple[int, int]:
        sh, sw = self.sections.shape[1:]
        return self.rows * sh, self.cols * sw

    def assemble(self, order: Optional[np.ndarray] = None) -> np.ndarray:
        """Tile sections back into a PSF, taking them in ``order`` (default identity)."""
        secs = self.sections if order is None else self.sections[order]
        sh, sw = secs.shape[1:]
        return secs.reshape(self.rows, self.cols, sh, sw).transpose(0, 2, 1, 3).reshape(
            self.rows * sh, self.cols * sw
        )


@dataclass
class SparsePsf:
    """Fixed-capacity coordinate list of the illuminated PSF entries.

    ``coords`` and ``values`` always hold ``pad_length`` rows; the first
    ``count`` are real entries in row-major order and the rest are
    ``(0, 0) / 0.0`` padding (harmless under scatter-add).
    """

    coords: np.ndarray
    values: np.ndarray
    original_shape: Tuple[int, int]
    pad_length: int
    count: int

    def __post_init__(self):
        if len(self.coords) != len(self.values):
            raise ShapeError("coords and values differ in length")
        if self.count > self.pad_length or len(self.coords) > self.pad_length:
            raise PadOverflowError(
                f"pad overflow: {max(self.count, len(self.coords))} entries, capacity {self.pad_length}"
            )

    @classmethod
    def from_entries(cls, coords, values, shape, pad_length: Optional[int] = None) -> "SparsePsf":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        count = len(values)
        pad_length = count if pad_length is None else pad_length
        if count > pad_length:
            raise PadOverflowError(f"pad overflow: {count} entries, capacity {pad_length}")
        pc = np.zeros((pad_length, 2), dtype=np.int64)
        pv = np.zeros(pad_length, dtype=np.float64)
        pc[:count], pv[:count] = coords, values
        return cls(pc, pv, tuple(shape), pad_length, count)


@dataclass
class TiledPsf:
    tiles: np.ndarray  # (T, t, t), row-major over the tile grid
    grid_shape: Tuple[int, int]

    @property
    def tile_size(self) -> int:
        return int(self.tiles.shape[-1])

    def refold(self) -> np.ndarray:
        gr, gc = self.grid_shape
        t = self.tile_size
        return self.tiles.reshape(gr, gc, t, t).transpose(0, 2, 1, 3).reshape(gr * t, gc * t)


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def center_crop(k: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    h, w = k.shape[-2:]
    th, tw = shape
    r0, c0 = (h - th) // 2, (w - tw) // 2
    return k[..., r0 : r0 + th, c0 : c0 + tw]


def split_sections(k: np.ndarray, rows: int = 5, cols: int = 5) -> PsfSectionGrid:
    """Cut ``k`` into ``rows * cols`` equal sections in row-major order.

    Dimensions that are not divisible are centre-cropped to the largest
    divisible size first.
    """
    if rows <= 0 or cols <= 0:
        raise ValueError(f"section grid must be positive, got {rows}x{cols}")
    k = np.asarray(k)
    h, w = k.shape
    if h < rows or w < cols:
        raise ShapeError(f"PSF {h}x{w} too small for a {rows}x{cols} grid")
    k = center_crop(k, (h - h % rows, w - w % cols))
    sh, sw = k.shape[0] // rows, k.shape[1] // cols
    sections = k.reshape(rows, sh, cols, sw).transpose(0, 2, 1, 3).reshape(rows * cols, sh, sw)
    return PsfSectionGrid(rows, cols, sections.copy())


def random_permutation(n: int, seed: SeedLike = None) -> Permutation:
    """Uniformly random permutation of ``n`` section indices."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return Permutation(_rng(seed).permutation(n), seed if isinstance(seed, int) else None)


def shuffle_psf(grid: PsfSectionGrid, perm: Permutation, normalize: bool = True) -> np.ndarray:
    """Build ``k_new`` by placing section ``perm.mapping[i]`` at slot ``i``."""
    if perm.n != grid.n:
        raise ValueError(f"permutation size {perm.n} does not match {grid.n} sections")
    k_new = grid.assemble(perm.mapping)
    return psf_normalize(k_new) if normalize else k_new


def default_pad_length(shape: Tuple[int, int]) -> int:
    return int(math.ceil(DEFAULT_PAD_FRAC * shape[0] * shape[1]))


def sparsify(
    k: np.ndarray, threshold: Optional[float] = None, pad_length: Optional[int] = None
) -> SparsePsf:
    """Coordinates and values of entries strictly above ``threshold``.

    ``threshold`` defaults to 1% of the PSF maximum and ``pad_length`` to a
    quarter of the PSF area.
    """
    k = np.asarray(k)
    if threshold is None:
        threshold = DEFAULT_THRESHOLD_FRAC * float(k.max(initial=0.0))
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if pad_length is None:
        pad_length = default_pad_length(k.shape)
    rr, cc = np.nonzero(k > threshold)
    if rr.size > pad_length:
        raise PadOverflowError(f"pad overflow: {rr.size} entries above threshold, capacity {pad_length}")
    return SparsePsf.from_entries(np.stack([rr, cc], axis=1), k[rr, cc], k.shape, pad_length)


def densify(s: SparsePsf) -> np.ndarray:
    """Scatter-add the coordinate list back onto a zero grid."""
    h, w = s.original_shape
    rr, cc = s.coords[:, 0], s.coords[:, 1]
    if ((rr < 0) | (rr >= h) | (cc < 0) | (cc >= w)).any():
        raise ShapeError(f"sparse coordinate outside {h}x{w}")
    grid = np.zeros((h, w), dtype=np.result_type(s.values, np.float64))
    np.add.at(grid, (rr, cc), s.values)
    return grid


def unfold_psf(k: np.ndarray, tile_size: int) -> TiledPsf:
    """Split ``k`` into contiguous ``tile_size`` squares stacked row-major."""
    k = np.asarray(k)
    h, w = k.shape
    if tile_size < 1 or tile_size > min(h, w):
        raise ShapeError(f"tile size {tile_size} does not fit PSF {h}x{w}")
    k = center_crop(k, (h - h % tile_size, w - w % tile_size))
    gr, gc = k.shape[0] // tile_size, k.shape[1] // tile_size
    tiles = k.reshape(gr, tile_size, gc, tile_size).transpose(0, 2, 1, 3).reshape(-1, tile_size, tile_size)
    return TiledPsf(tiles.copy(), (gr, gc))


# --------------------------------------------------------------------------
# torch batch versions used by the generator input pipeline


def fit_psf(k, size: int) -> torch.Tensor:
    """Bring a PSF batch ``(N, 1, h, w)`` to ``size x size`` and renormalize.

    Larger PSFs are area-averaged down; smaller ones are zero-padded around
    the centre, which keeps the circular-convolution operator unchanged.
    """
    if not (isinstance(k, torch.Tensor) and k.is_floating_point()):
        k = torch.as_tensor(np.asarray(k), dtype=torch.get_default_dtype())
    while k.ndim < 4:
        k = k.unsqueeze(0)
    h, w = k.shape[-2:]
    if h > size or w > size:
        k = F.interpolate(k, size=(min(h, size), min(w, size)), mode="area")
        h, w = k.shape[-2:]
    if h < size or w < size:
        # Even pad totals split so the PSF centre index lands on size // 2.
        top = size // 2 - h // 2
        left = size // 2 - w // 2
        k = F.pad(k, (left, size - w - left, top, size - h - top))
    return psf_normalize(k)


def sparsify_batch(k: torch.Tensor, pad_length: int, threshold_frac: float = DEFAULT_THRESHOLD_FRAC):
    """Batched :func:`sparsify` returning ``(coords (N, P, 2), values (N, P))``."""
    n = k.shape[0]
    h, w = k.shape[-2:]
    flat = k.reshape(n, h * w)
    thr = threshold_frac * flat.max(dim=1, keepdim=True).values
    mask = flat > thr
    counts = mask.sum(dim=1)
    if int(counts.max()) > pad_length:
        raise PadOverflowError(
            f"pad overflow: {int(counts.max())} entries above threshold, capacity {pad_length}"
        )
    # Stable sort of the negated mask puts surviving indices first, row-major.
    order = torch.argsort((~mask).to(torch.int8), dim=1, stable=True)[:, :pad_length]
    keep = torch.arange(pad_length, device=k.device)[None, :] < counts[:, None]
    idx = torch.where(keep, order, torch.zeros_like(order))
    values = torch.where(keep, torch.gather(flat, 1, idx), torch.zeros((), dtype=flat.dtype))
    coords = torch.stack([idx // w, idx % w], dim=-1)
    return coords, values


def densify_batch(coords: torch.Tensor, values: torch.Tensor, shape: Tuple[int, int]) -> torch.Tensor:
    """Scatter-add ``(N, P)`` values at ``(N, P, 2)`` coords into ``(N, 1, H, W)``."""
    h, w = shape
    n = values.shape[0]
    flat_idx = coords[..., 0] * w + coords[..., 1]
    out = torch.zeros(n, h * w, dtype=values.dtype, device=values.device)
    out = out.scatter_add(1, flat_idx, values)
    return out.reshape(n, 1, h, w)


def unfold_batch(k: torch.Tensor, tile_size: int) -> torch.Tensor:
    """Batched :func:`unfold_psf`: ``(N, 1, H, W)`` to ``(N, T, t, t)``."""
    n = k.shape[0]
    h, w = k.shape[-2:]
    if h % tile_size or w % tile_size:
        raise ShapeError(f"PSF {h}x{w} not divisible by tile size {tile_size}")
    gr, gc = h // tile_size, w // tile_size
    t = k.reshape(n, gr, tile_size, gc, tile_size).permute(0, 1, 3, 2, 4)
    return t.reshape(n, gr * gc, tile_size, tile_size)


# --------------------------------------------------------------------------
# synthetic seed PSF


def caustic_psf(
    size: int = 128,
    seed: SeedLike = 0,
    smoothness: Optional[float] = None,
    strength: float = 2.0,
    oversample: int = 4,
    aperture: float = 0.85,
) -> np.ndarray:
    """Diffuser-like caustic pattern from ray-tracing a random smooth surface.

    Rays on an oversampled grid are deflected by the gradient of a Gaussian
    filtered random height field (``smoothness`` pixels, default
    ``size / 10``); their landing density forms thin bright
    caustic curves on a dark background.  ``aperture`` is the radius of the
    illuminated disc as a fraction of the half-width.  Returns a normalized
    ``size x size`` float64 PSF.
    """
    rng = _rng(seed)
    if smoothness is None:
        smoothness = size / 10.0
    m = size * oversample
    height = ndimage.gaussian_filter(rng.standard_normal((m, m)), smoothness * oversample, mode="wrap")
    height /= height.std() + 1e-12
    gy, gx = np.gradient(height)
    # Caustics need a deflection of order 1 / curvature ~ sigma^2.
    scale = strength * (smoothness * oversample) ** 2
    yy, xx = np.mgrid[0:m, 0:m].astype(np.float64)
    ry, rx = yy + scale * gy, xx + scale * gx
    centre = (m - 1) / 2.0
    inside = (yy - centre) ** 2 + (xx - centre) ** 2 <= (aperture * m / 2.0) ** 2
    counts, _, _ = np.histogram2d(
        ry[inside] / oversample, rx[inside] / oversample, bins=size, range=[[0, size], [0, size]]
    )
    psf = counts ** 2  # sharpen caustic ridges relative to diffuse background
    psf = ndimage.gaussian_filter(psf, 0.5)
    return psf_normalize(psf)


def psf_sparsity(k: np.ndarray, frac: float = DEFAULT_THRESHOLD_FRAC) -> float:
    """Fraction of entries above ``frac`` of the maximum."""
    k = np.asarray(k)
    return float((k > frac * k.max()).mean())


def psf_family(
    seed_psf: np.ndarray, perms: Sequence[Permutation], rows: int = 5, cols: int = 5
) -> np.ndarray:
    """Stack of shuffled PSFs, one per permutation: ``(len(perms), H, W)``."""
    grid = split_sections(seed_psf, rows, cols)
    return np.stack([shuffle_psf(grid, p) for p in perms])
