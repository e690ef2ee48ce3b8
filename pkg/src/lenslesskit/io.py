"""File formats: PNG images with JSON sidecars, float32 PSF grids with a JSON header.

PSF file layout: one line of UTF-8 JSON ``{"height", "width", "normalized",
"dtype": "float32"}`` terminated by ``\\n``, followed by ``height * width``
little-endian float32 values in row-major order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Tuple, Union

import cv2
import numpy as np
import torch

PathLike = Union[str, Path]


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _to_hwc(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[..., None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected a (C, H, W) image, got shape {img.shape}")
    return img.transpose(1, 2, 0)


def save_image(
    path: PathLike,
    img,
    bits: int = 8,
    seed: Optional[int] = None,
    value_range: Tuple[float, float] = (0.0, 1.0),
    extra: Optional[dict] = None,
) -> Path:
    """Write a ``(C, H, W)`` float image as 8- or 16-bit PNG plus a JSON sidecar.

    Values are clipped to ``value_range`` before quantization.
    """
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    path = Path(path)
    hwc = _to_hwc(img)
    lo, hi = value_range
    scaled = (np.clip(hwc, lo, hi) - lo) / (hi - lo)
    maxval = 2 ** bits - 1
    q = np.round(scaled * maxval).astype(np.uint8 if bits == 8 else np.uint16)
    if q.ndim == 3 and q.shape[-1] == 3:
        q = q[..., ::-1]  # cv2 expects BGR
    elif q.ndim == 3:
        q = q[..., 0]
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"failed to write {path}")
    meta = {"dtype": f"uint{bits}", "range": [lo, hi], "seed": seed, "shape": list(hwc.shape)}
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return path


def load_image(path: PathLike) -> torch.Tensor:
    """Read a PNG written by :func:`save_image` (or any 8/16-bit image) as ``(C, H, W)`` float32.

    The sidecar range, when present, maps the integer codes back to values.
    """
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot decode image {path}")
    if raw.ndim == 3:
        raw = raw[..., :3][..., ::-1]
    else:
        raw = raw[..., None]
    maxval = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float32) / maxval
    side = sidecar_path(path)
    if side.is_file():
        lo, hi = json.loads(side.read_text()).get("range", [0.0, 1.0])
        img = img * (hi - lo) + lo
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def save_psf(path: PathLike, k, normalized: Optional[bool] = None) -> Path:
    k = np.asarray(k.detach().cpu().numpy() if isinstance(k, torch.Tensor) else k, dtype=np.float32)
    k = np.squeeze(k)
    if k.ndim != 2:
        raise ValueError(f"PSF must be 2-D, got shape {k.shape}")
    if normalized is None:
        normalized = bool(abs(float(k.sum(dtype=np.float64)) - 1.0) < 1e-4)
    header = {"height": int(k.shape[0]), "width": int(k.shape[1]), "normalized": normalized, "dtype": "float32"}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(k.astype("<f4").tobytes())
    return path


def load_psf(path: PathLike, with_header: bool = False):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        data = np.frombuffer(f.read(), dtype="<f4")
    h, w = header["height"], header["width"]
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    k = data.reshape(h, w).astype(np.float64)
    return (k, header) if with_header else k
