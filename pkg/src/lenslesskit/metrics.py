"""Image-quality metrics, evaluation reports and runtime benchmarks."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
from skimage.metrics import structural_similarity

from .errors import ShapeError

# Reference values for the metric we do not compute.
LPIPS_REFERENCE = {"Y-Net single-PSF": 0.218, "TU-Net single-PSF": 0.236}


def _np(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Gaussian-window SSIM (sigma 1.5) averaged over channels.

    Inputs are ``(H, W)`` or channel-first ``(C, H, W)``.
    """
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise ShapeError(f"image {a.shape[-2:]} smaller than SSIM window {window}")
    vals = [
        structural_similarity(
            ca, cb, win_size=window, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, K1=k1, K2=k2, data_range=peak,
        )
        for ca, cb in zip(a, b)
    ]
    return float(np.mean(vals))


@dataclass
class EvalReport:
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)
    runtimes: List[float] = field(default_factory=list)
    fingerprint: Dict[str, object] = field(default_factory=dict)
    names: List[str] = field(default_factory=list)

    def add(self, name: str, reconstruction, target, runtime: Optional[float] = None) -> None:
        self.names.append(name)
        self.psnr.append(psnr(reconstruction, target))
        self.ssim.append(ssim(reconstruction, target))
        if runtime is not None:
            self.runtimes.append(runtime)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    @property
    def mean_runtime(self) -> float:
        return float(np.mean(self.runtimes)) if self.runtimes else math.nan

    def summary(self) -> Dict[str, object]:
        return {
            "count": len(self.psnr),
            "psnr_db": self.mean_psnr,
            "ssim": self.mean_ssim,
            "lpips": None,
            "lpips_note": "not computed; reference values " + json.dumps(LPIPS_REFERENCE),
            "runtime_s": self.mean_runtime,
        }

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), **asdict(self)}, indent=2)

    def write(self, stem: Union[str, Path]) -> None:
        """Write ``<stem>.json`` and a per-image ``<stem>.csv``."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".json").write_text(self.to_json())
        with open(stem.with_suffix(".csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", "psnr_db", "ssim", "runtime_s"])
            for i, name in enumerate(self.names):
                rt = self.runtimes[i] if i < len(self.runtimes) else ""
                w.writerow([name, self.psnr[i], self.ssim[i], rt])


def config_fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def time_call(fn: Callable[[], object], repeats: int = 5, warmup: int = 1) -> List[float]:
    """Wall-clock seconds of ``repeats`` calls after ``warmup`` discarded calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def runtime_benchmark(
    ops: Dict[str, Callable[[int], Callable[[], object]]],
    sizes: Sequence[int],
    repeats: int = 5,
    warmup: int = 1,
) -> List[Dict[str, object]]:
    """Median runtime per (op, size).

    ``ops`` maps a name to a factory that, given a size, prepares inputs and
    returns a zero-argument callable to time.
    """
    rows = []
    for size in sizes:
        for name, factory in ops.items():
            fn = factory(size)
            times = time_call(fn, repeats, warmup)
            rows.append({"op": name, "size": size, "median_s": statistics.median(times), "repeats": repeats})
    return rows


def convolution_ops(batch: int = 32, channels: int = 3, psf_size: Union[int, Callable[[int], int]] = 32, seed: int = 0):
    """Benchmark factories for the FFT forward model and dense spatial convolution."""
    from .physics import fft_convolve, spatial_convolve

    def inputs(size):
        g = torch.Generator().manual_seed(seed)
        ks = psf_size(size) if callable(psf_size) else psf_size
        x = torch.rand(batch, channels, size, size, generator=g)
        k = torch.rand(ks, ks, generator=g)
        return x, k / k.sum()

    def fft_factory(size):
        x, k = inputs(size)
        return lambda: fft_convolve(x, k)

    def direct_factory(size):
        x, k = inputs(size)
        return lambda: spatial_convolve(x, k)

    return {"fft": fft_factory, "direct": direct_factory}


def shuffle_ops(rows: int = 5, cols: int = 5, seed: int = 0):
    from .psf import caustic_psf, random_permutation, shuffle_psf, split_sections

    def factory(size):
        grid = split_sections(caustic_psf(size, seed), rows, cols)
        rng = np.random.default_rng(seed)
        return lambda: shuffle_psf(grid, random_permutation(grid.n, rng))

    return {"psf_shuffle": factory}


def format_table(rows: Iterable[Dict[str, object]]) -> str:
    rows = list(rows)
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
