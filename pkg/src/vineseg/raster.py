"""Multi-band rasters: band-stack directories, NDVI, min-max scaling, PGM masks.

A band stack on disk is a directory holding ``header.json`` and one raw
little-endian float32 plane per band (row-major, ``width * height`` values).
Masks are 8-bit binary PGM (P5) images whose gray value is the class index;
the class count is kept in a ``# num_classes K`` comment line.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

HEADER_NAME = "header.json"
STACK_FORMAT = "vineseg.bandstack/1"
NDVI_BAND = "ndvi"
NDVI_ENCODING = "(ndvi+1)/2"


class RasterFormatError(ValueError):
    """Malformed or inconsistent raster data on disk or in memory."""


class BandRole(str, enum.Enum):
    RED = "red"
    NIR = "nir"
    OTHER = "other"


@dataclass(frozen=True)
class BandInfo:
    name: str
    role: BandRole = BandRole.OTHER

    def __post_init__(self):
        object.__setattr__(self, "role", BandRole(self.role))
        if not self.name or "/" in self.name:
            raise RasterFormatError(f"invalid band name {self.name!r}")


@dataclass(frozen=True, eq=False)
class BandStack:
    """Immutable C x H x W float32 raster with named band roles."""

    bands: tuple[BandInfo, ...]
    data: np.ndarray
    attrs: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        bands = tuple(self.bands)
        object.__setattr__(self, "bands", bands)
        if not bands:
            raise RasterFormatError("a band stack needs at least one band")
        names = [b.name for b in bands]
        if len(set(names)) != len(names):
            raise RasterFormatError(f"duplicate band names in {names}")
        for role in (BandRole.RED, BandRole.NIR):
            if sum(b.role is role for b in bands) > 1:
                raise RasterFormatError(f"more than one band has role {role.value}")
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or data.shape[0] != len(bands):
            raise RasterFormatError(f"data shape {data.shape} does not match {len(bands)} bands")
        bad = ~np.isfinite(data).reshape(len(bands), -1).all(axis=1)
        if bad.any():
            raise RasterFormatError(f"non-finite values in band {names[int(np.argmax(bad))]!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "attrs", dict(self.attrs))

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.bands]

    def band_index(self, role: BandRole | str) -> int:
        role = BandRole(role)
        for i, b in enumerate(self.bands):
            if b.role is role:
                return i
        raise RasterFormatError(f"stack has no band with role {role.value}")

    def band(self, name: str) -> np.ndarray:
        return self.data[self.names.index(name)]

    def __eq__(self, other):
        if not isinstance(other, BandStack):
            return NotImplemented
        return (
            self.bands == other.bands
            and self.attrs == other.attrs
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class MaskRaster:
    """Immutable H x W class-label raster with labels in [0, num_classes)."""

    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        labels = np.array(self.labels, copy=True)
        if labels.ndim != 2:
            raise RasterFormatError(f"mask must be 2-D, got shape {labels.shape}")
        if not 2 <= self.num_classes <= 256:
            raise RasterFormatError(f"num_classes must be in [2, 256], got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise RasterFormatError(f"mask labels outside [0, {self.num_classes})")
        labels = labels.astype(np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, MaskRaster):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.labels, other.labels)


# ---------------------------------------------------------------------------
# band-stack I/O
# ---------------------------------------------------------------------------


def _plane_name(index: int) -> str:
    return f"band_{index:03d}.f32"


def write_band_stack(stack: BandStack, path: str | Path) -> None:
    if not stack.bands:
        raise RasterFormatError("refusing to write an empty band stack")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "format": STACK_FORMAT,
        "width": stack.width,
        "height": stack.height,
        "dtype": "float32",
        "byte_order": "little",
        "bands": [
            {"name": b.name, "role": b.role.value, "file": _plane_name(i)} for i, b in enumerate(stack.bands)
        ],
        "attrs": dict(stack.attrs),
    }
    for i in range(len(stack.bands)):
        (path / _plane_name(i)).write_bytes(stack.data[i].astype("<f4").tobytes())
    (path / HEADER_NAME).write_text(json.dumps(header, indent=2), encoding="utf-8")


def read_band_stack(path: str | Path) -> BandStack:
    path = Path(path)
    try:
        header = json.loads((path / HEADER_NAME).read_text(encoding="utf-8"))
        width, height = int(header["width"]), int(header["height"])
        band_entries = header["bands"]
    except (ValueError, KeyError, TypeError) as exc:
        raise RasterFormatError(f"garbled header in {path}: {exc}") from exc
    if header.get("dtype", "float32") != "float32" or header.get("byte_order", "little") != "little":
        raise RasterFormatError("only little-endian float32 stacks are supported")
    if width < 1 or height < 1 or not band_entries:
        raise RasterFormatError(f"header in {path} declares an empty raster")

    bands, planes = [], []
    for i, entry in enumerate(band_entries):
        try:
            info = BandInfo(entry["name"], entry.get("role", "other"))
        except (KeyError, ValueError) as exc:
            raise RasterFormatError(f"garbled band entry {i} in {path}: {exc}") from exc
        raw = (path / entry.get("file", _plane_name(i))).read_bytes()
        if len(raw) != width * height * 4:
            raise RasterFormatError(
                f"band {info.name!r}: expected {width * height * 4} bytes, found {len(raw)}"
            )
        plane = np.frombuffer(raw, dtype="<f4").reshape(height, width)
        if not np.isfinite(plane).all():
            raise RasterFormatError(f"band {info.name!r} contains non-finite values")
        bands.append(info)
        planes.append(plane)
    return BandStack(tuple(bands), np.stack(planes), header.get("attrs", {}))


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def compute_ndvi(stack: BandStack) -> np.ndarray:
    """(nir - red) / (nir + red) per pixel, 0 where the denominator is 0."""
    nir = stack.data[stack.band_index(BandRole.NIR)].astype(np.float64)
    red = stack.data[stack.band_index(BandRole.RED)].astype(np.float64)
    denom = nir + red
    out = np.zeros_like(denom)
    np.divide(nir - red, denom, out=out, where=denom != 0)
    return np.clip(out, -1.0, 1.0)


def minmax_normalize(stack: BandStack) -> BandStack:
    """Rescale each band independently to [0, 1]; constant bands become 0."""
    data = stack.data.astype(np.float64)
    lo = data.min(axis=(1, 2), keepdims=True)
    hi = data.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    out = np.zeros_like(data)
    np.divide(data - lo, span, out=out, where=span > 0)
    return BandStack(stack.bands, np.clip(out, 0.0, 1.0), stack.attrs)


def preprocess(stack: BandStack, append_ndvi: bool = True) -> BandStack:
    """Model input: min-max scaled bands plus NDVI mapped to [0, 1].

    NDVI is computed from the unscaled reflectances, then appended after the
    spectral bands have been normalized, encoded as ``(ndvi + 1) / 2``.
    """
    normalized = minmax_normalize(stack)
    if not append_ndvi:
        return normalized
    if NDVI_BAND in stack.names:
        raise RasterFormatError(f"stack already has a band named {NDVI_BAND!r}")
    ndvi = (compute_ndvi(stack) + 1.0) / 2.0
    attrs = dict(normalized.attrs, ndvi_encoding=NDVI_ENCODING, normalization="minmax-per-band")
    return BandStack(
        normalized.bands + (BandInfo(NDVI_BAND),),
        np.concatenate([normalized.data, ndvi[None].astype(np.float32)]),
        attrs,
    )


def stack_from_arrays(arrays: Sequence[np.ndarray], bands: Sequence[BandInfo]) -> BandStack:
    return BandStack(tuple(bands), np.stack([np.asarray(a, dtype=np.float32) for a in arrays]))


# ---------------------------------------------------------------------------
# mask I/O (binary PGM)
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, image: np.ndarray, comments: Sequence[str] = ()) -> None:
    """Write an 8-bit single-channel P5 image."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise RasterFormatError("PGM writer expects a 2-D uint8 array")
    head = b"P5\n" + b"".join(f"# {c}\n".encode("ascii") for c in comments)
    head += f"{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(head + image.tobytes())


def read_pgm(path: str | Path) -> tuple[np.ndarray, list[str]]:
    """Read an 8-bit P5 image, returning the pixels and its comment lines."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise RasterFormatError(f"{path} is not a binary PGM (P5) file")
    pos = 2
    comments: list[str] = []
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            end = raw.index(b"\n", pos)
            comments.append(raw[pos + 1 : end].decode("ascii", "replace").strip())
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise RasterFormatError(f"garbled PGM header in {path}")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise RasterFormatError("only 8-bit PGM files are supported")
    body = raw[pos : pos + width * height]
    if len(body) != width * height:
        raise RasterFormatError(f"PGM {path} is truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy(), comments


def write_mask(mask: MaskRaster, path: str | Path) -> None:
    write_pgm(path, mask.labels, comments=[f"num_classes {mask.num_classes}"])


def read_mask(path: str | Path, num_classes: int | None = None) -> MaskRaster:
    labels, comments = read_pgm(path)
    if num_classes is None:
        num_classes = 2
        for c in comments:
            if c.startswith("num_classes"):
                num_classes = int(c.split()[1])
    if labels.size and labels.max() >= num_classes:
        raise RasterFormatError(f"{path}: pixel value {labels.max()} exceeds declared num_classes={num_classes}")
    return MaskRaster(labels, num_classes)
