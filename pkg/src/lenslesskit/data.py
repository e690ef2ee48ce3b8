"""Ground-truth corpus ingestion and paired (lensed, lensless) sample synthesis.

Only lensed images are stored; lensless measurements are always synthesized
on the fly through the forward model with whatever PSF is requested.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFilter

from .errors import LenslessError
from .physics import CIRCULAR, ConvPolicy, NoiseSpec, apply_forward

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
SPLITS = ("train", "val", "test")


class DataError(LenslessError):
    """Corpus problems: missing directory, undecodable files, checksum drift."""


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ImageRecord:
    path: str  # relative to the manifest root
    checksum: str
    split: str


@dataclass
class DatasetManifest:
    root: str
    records: List[ImageRecord]
    seed: int = 0
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed_psf: Optional[str] = None
    resolution: Optional[int] = None
    resize_policy: str = "area-then-center-crop"
    version: int = 1

    def split(self, name: str) -> List[ImageRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def sizes(self) -> Dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def path_of(self, record: ImageRecord) -> Path:
        return Path(self.root) / record.path

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: Union[str, Path], verify: bool = False) -> "DatasetManifest":
        data = json.loads(Path(path).read_text())
        data["records"] = [ImageRecord(**r) for r in data["records"]]
        data["ratios"] = tuple(data["ratios"])
        manifest = cls(**data)
        if verify:
            manifest.verify()
        return manifest

    def verify(self) -> None:
        bad = [r.path for r in self.records if sha256_file(self.path_of(r)) != r.checksum]
        if bad:
            raise DataError(f"checksum mismatch for {len(bad)} file(s), e.g. {bad[:3]}")


def _split_key(seed: int, name: str) -> str:
    return hashlib.sha256(f"{seed}:{name}".encode()).hexdigest()


def assign_splits(names: Sequence[str], seed: int = 0, ratios=(0.8, 0.1, 0.1)) -> Dict[str, str]:
    """Deterministic split: order names by a seeded hash, then cut by ratio."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three nonnegative values summing to 1, got {ratios}")
    order = sorted(names, key=lambda n: _split_key(seed, n))
    n = len(order)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    out = {}
    for i, name in enumerate(order):
        out[name] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return out


def ingest(
    directory: Union[str, Path],
    seed: int = 0,
    ratios=(0.8, 0.1, 0.1),
    skip_bad: bool = False,
    seed_psf: Optional[str] = None,
    resolution: Optional[int] = None,
) -> DatasetManifest:
    """Scan ``directory`` recursively for images and build a split manifest."""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    good, bad = [], []
    for p in files:
        try:
            with Image.open(p) as im:
                im.verify()
            good.append(p)
        except Exception:
            bad.append(p)
    if bad and not skip_bad:
        listing = ", ".join(str(p.relative_to(root)) for p in bad[:10])
        raise DataError(f"{len(bad)} undecodable image(s): {listing}")
    if not good:
        raise DataError(f"no readable images under {root}")
    names = [p.relative_to(root).as_posix() for p in good]
    splits = assign_splits(names, seed, ratios)
    records = [ImageRecord(n, sha256_file(root / n), splits[n]) for n in names]
    return DatasetManifest(
        str(root.resolve()), records, seed, tuple(ratios), seed_psf=seed_psf, resolution=resolution
    )


def resize_square(img: Image.Image, resolution: int) -> Image.Image:
    """Area-average so the short side equals ``resolution``, then centre-crop."""
    w, h = img.size
    if (w, h) != (resolution, resolution):
        scale = resolution / min(w, h)
        nw, nh = max(resolution, round(w * scale)), max(resolution, round(h * scale))
        if (nw, nh) != (w, h):
            img = img.resize((nw, nh), Image.BOX)
        left, top = (nw - resolution) // 2, (nh - resolution) // 2
        img = img.crop((left, top, left + resolution, top + resolution))
    return img


def load_lensed(path: Union[str, Path], resolution: int, channels: int = 3) -> torch.Tensor:
    """Load an image as ``(C, R, R)`` float32 in ``[0, 1]``."""
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        im = resize_square(im, resolution)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


class LensedImages:
    """Random-access view of one split, optionally cached in memory."""

    def __init__(self, manifest: DatasetManifest, split: str, resolution: int, channels: int = 3, cache: bool = True):
        self.manifest = manifest
        self.records = manifest.split(split)
        if not self.records:
            raise DataError(f"split {split!r} is empty")
        self.resolution = resolution
        self.channels = channels
        self._cache: Optional[torch.Tensor] = None
        if cache:
            self._cache = torch.stack([self._load(i) for i in range(len(self.records))])

    def _load(self, i: int) -> torch.Tensor:
        return load_lensed(self.manifest.path_of(self.records[i]), self.resolution, self.channels)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self._cache[i] if self._cache is not None else self._load(i)

    def batch(self, indices: Sequence[int]) -> torch.Tensor:
        idx = [int(i) for i in indices]
        if self._cache is not None:
            return self._cache[idx]
        return torch.stack([self._load(i) for i in idx])


def sample_pair(
    manifest: DatasetManifest,
    index: int,
    psf,
    noise: NoiseSpec = NoiseSpec(),
    split: str = "train",
    resolution: int = 128,
    policy: ConvPolicy = CIRCULAR,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Load lensed image ``index`` of ``split`` and synthesize its lensless twin."""
    records = manifest.split(split)
    if not 0 <= index < len(records):
        raise IndexError(f"index {index} out of range for split {split!r} ({len(records)} images)")
    x = load_lensed(manifest.path_of(records[index]), resolution)
    k = torch.as_tensor(np.asarray(psf), dtype=x.dtype)
    return x, apply_forward(x, k, noise, policy)


# --------------------------------------------------------------------------
# procedural stand-in corpus


def synthetic_scene(size: int, rng: np.random.Generator) -> Image.Image:
    """Colour-gradient background with a handful of soft-edged shapes."""
    big = size * 2
    corners = rng.uniform(0.05, 0.95, size=(2, 2, 3))
    t = np.linspace(0, 1, big)
    top = corners[0, 0] * (1 - t[:, None]) + corners[0, 1] * t[:, None]
    bottom = corners[1, 0] * (1 - t[:, None]) + corners[1, 1] * t[:, None]
    bg = top[None, :, :] * (1 - t[:, None, None]) + bottom[None, :, :] * t[:, None, None]
    img = Image.fromarray((bg * 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for _ in range(rng.integers(3, 9)):
        colour = tuple(int(c) for c in rng.integers(0, 256, 3))
        cx, cy = rng.uniform(0, big, 2)
        rx, ry = rng.uniform(big * 0.06, big * 0.3, 2)
        box = [cx - rx, cy - ry, cx + rx, cy + ry]
        kind = rng.integers(3)
        if kind == 0:
            draw.ellipse(box, fill=colour)
        elif kind == 1:
            draw.rectangle(box, fill=colour)
        else:
            pts = [tuple(rng.uniform(0, big, 2)) for _ in range(3)]
            draw.polygon(pts, fill=colour)
    img = img.filter(ImageFilter.GaussianBlur(1.0))
    return img.resize((size, size), Image.BOX)


def write_scene_corpus(directory: Union[str, Path], count: int, size: int = 64, seed: int = 0) -> List[Path]:
    """Write ``count`` procedural scenes as PNG files and return their paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        p = out / f"scene_{i:05d}.png"
        synthetic_scene(size, rng).save(p)
        paths.append(p)
    return paths
