"""Static image renders of probability rasters and class masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .raster import MaskRaster, write_pgm

# fixed class colors (RGB); class k uses entry k mod len
PALETTE: tuple[tuple[int, int, int], ...] = (
    (0, 0, 0),
    (46, 160, 67),
    (240, 200, 40),
    (200, 50, 50),
    (60, 110, 220),
    (170, 80, 190),
    (250, 140, 30),
    (90, 200, 210),
)


def quantize_probability(prob: np.ndarray) -> np.ndarray:
    """Linear [0, 1] -> 0..255 with round-half-up: floor(p * 255 + 0.5)."""
    p = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    return np.floor(p * 255.0 + 0.5).astype(np.uint8)


def mask_gray_levels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Evenly spaced gray levels, class 0 black and class K-1 white."""
    levels = quantize_probability(np.arange(num_classes) / (num_classes - 1))
    return levels[labels]


def _format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix not in (".pgm", ".png"):
        raise ValueError(f"render output must end in .pgm or .png, got {path.name!r}")
    return suffix[1:]


def render_probability(prob: np.ndarray, path: str | Path) -> None:
    """Write an H x W probability plane as an 8-bit grayscale image."""
    path = Path(path)
    fmt = _format(path)
    prob = np.asarray(prob)
    if prob.ndim != 2:
        raise ValueError(f"expected a 2-D probability plane, got shape {prob.shape}")
    if not np.all(np.isfinite(prob)):
        raise ValueError("probability raster contains non-finite values")
    gray = quantize_probability(prob)
    if fmt == "pgm":
        write_pgm(path, gray)
    else:
        Image.fromarray(gray).save(path, format="PNG")


def render_mask(mask: MaskRaster, path: str | Path) -> None:
    """Class masks become palette PNGs or evenly spaced gray PGMs."""
    path = Path(path)
    fmt = _format(path)
    if fmt == "pgm":
        write_pgm(path, mask_gray_levels(mask.labels, mask.num_classes))
        return
    h, w = mask.labels.shape
    img = Image.frombytes("P", (w, h), np.ascontiguousarray(mask.labels).tobytes())
    flat = [c for i in range(256) for c in PALETTE[i % len(PALETTE)]]
    img.putpalette(flat)
    img.save(path, format="PNG")
