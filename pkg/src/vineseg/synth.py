"""Synthetic multiband vineyard scenes and box downsampling.

Scenes are built from a :class:`SceneSpec`: rectangular vineyard blocks whose
pixels alternate between vine-row and inter-row-soil spectra with a fixed row
period, on a background of vegetation and optional water bodies. Additive
Gaussian noise is clamped at 0 so reflectances stay non-negative.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .raster import BandInfo, BandRole, BandStack, MaskRaster

# Sentinel-2 MSI bands without the B10 cirrus band.
SENTINEL2_BANDS: tuple[BandInfo, ...] = tuple(
    BandInfo(name, {"B04": BandRole.RED, "B08": BandRole.NIR}.get(name, BandRole.OTHER))
    for name in ("B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12")
)

# Rough mean surface reflectances per band, in SENTINEL2_BANDS order.
DEFAULT_SPECTRA: dict[str, list[float]] = {
    "vine_row": [0.03, 0.05, 0.08, 0.05, 0.12, 0.30, 0.38, 0.42, 0.44, 0.40, 0.22, 0.12],
    "vine_row_white": [0.04, 0.06, 0.11, 0.06, 0.16, 0.36, 0.45, 0.50, 0.52, 0.47, 0.27, 0.15],
    "inter_row_soil": [0.10, 0.13, 0.17, 0.22, 0.25, 0.27, 0.28, 0.29, 0.30, 0.30, 0.36, 0.32],
    "background_vegetation": [0.01, 0.03, 0.05, 0.03, 0.07, 0.20, 0.26, 0.30, 0.32, 0.30, 0.14, 0.06],
    "water": [0.06, 0.05, 0.04, 0.03, 0.02, 0.01, 0.01, 0.01, 0.01, 0.01, 0.005, 0.003],
}

BACKGROUND = "background_vegetation"
WATER = "water"


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    width: int
    height: int

    def overlaps(self, other: "Rect") -> bool:
        return (
            self.x < other.x + other.width
            and other.x < self.x + self.width
            and self.y < other.y + other.height
            and other.y < self.y + self.height
        )


@dataclass(frozen=True)
class Block(Rect):
    """A vineyard block. ``label`` is the mask class written for every block pixel."""

    row_period: int = 2
    row_orientation: str = "horizontal"
    label: int = 1
    vine_class: str = "vine_row"
    soil_class: str = "inter_row_soil"


@dataclass
class SceneSpec:
    width: int
    height: int
    blocks: list[Block] = field(default_factory=list)
    water: list[Rect] = field(default_factory=list)
    class_spectra: dict[str, list[float]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SPECTRA.items()})
    noise_sigma: float | list[float] = 0.0
    seed: int = 0
    bands: list[BandInfo] = field(default_factory=lambda: list(SENTINEL2_BANDS))
    num_classes: int | None = None

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise SceneSpecError("scene dimensions must be positive")
        n_bands = len(self.bands)
        for name, spectrum in self.class_spectra.items():
            if len(spectrum) != n_bands:
                raise SceneSpecError(f"spectrum {name!r} has {len(spectrum)} values for {n_bands} bands")
            if min(spectrum) < 0:
                raise SceneSpecError(f"spectrum {name!r} has negative reflectance")
        for required in (BACKGROUND, WATER):
            if required not in self.class_spectra:
                raise SceneSpecError(f"missing spectrum for {required!r}")
        sigma = np.broadcast_to(np.asarray(self.noise_sigma, dtype=float), (n_bands,))
        if (sigma < 0).any():
            raise SceneSpecError("noise_sigma must be >= 0")
        for rect in [*self.blocks, *self.water]:
            if rect.width < 1 or rect.height < 1:
                raise SceneSpecError(f"empty rectangle {rect}")
            if rect.x < 0 or rect.y < 0 or rect.x + rect.width > self.width or rect.y + rect.height > self.height:
                raise SceneSpecError(f"rectangle {rect} lies outside the {self.width}x{self.height} scene")
        for i, b in enumerate(self.blocks):
            if b.row_period < 2:
                raise SceneSpecError(f"block {i}: row_period must be >= 2")
            if b.row_orientation not in ("horizontal", "vertical"):
                raise SceneSpecError(f"block {i}: unknown row_orientation {b.row_orientation!r}")
            if b.label < 1:
                raise SceneSpecError(f"block {i}: vineyard label must be >= 1")
            for cls in (b.vine_class, b.soil_class):
                if cls not in self.class_spectra:
                    raise SceneSpecError(f"block {i}: no spectrum for class {cls!r}")
            for j, other in enumerate(self.blocks[:i]):
                if b.overlaps(other) and b.label != other.label:
                    raise SceneSpecError(f"blocks {j} and {i} overlap with conflicting labels")
        k = self.resolved_num_classes
        if any(b.label >= k for b in self.blocks):
            raise SceneSpecError(f"block label exceeds num_classes={k}")

    @property
    def resolved_num_classes(self) -> int:
        if self.num_classes is not None:
            return self.num_classes
        return max([1, *(b.label for b in self.blocks)]) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bands"] = [{"name": b.name, "role": b.role.value} for b in self.bands]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SceneSpecError(f"unknown scene spec keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "blocks" in d:
                d["blocks"] = [Block(**b) for b in d["blocks"]]
            if "water" in d:
                d["water"] = [Rect(**r) for r in d["water"]]
            if "bands" in d:
                d["bands"] = [BandInfo(b["name"], b.get("role", "other")) for b in d["bands"]]
            spec = cls(**d)
        except (TypeError, KeyError) as exc:
            raise SceneSpecError(f"malformed scene spec: {exc}") from exc
        spec.validate()
        return spec


def load_scene_spec(path: str | Path) -> SceneSpec:
    return SceneSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_scene_spec(spec: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")


def generate_scene(spec: SceneSpec) -> tuple[BandStack, MaskRaster]:
    """Render the scene described by ``spec``; a pure function of the spec and its seed."""
    spec.validate()
    names = list(spec.class_spectra)
    index = {name: i for i, name in enumerate(names)}
    spectra = np.array([spec.class_spectra[n] for n in names], dtype=np.float64)  # (K, C)

    classmap = np.full((spec.height, spec.width), index[BACKGROUND], dtype=np.int64)
    labels = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for r in spec.water:
        classmap[r.y : r.y + r.height, r.x : r.x + r.width] = index[WATER]
    for b in spec.blocks:
        ys = np.arange(b.height)[:, None]
        xs = np.arange(b.width)[None, :]
        along = ys if b.row_orientation == "horizontal" else xs
        on_row = np.broadcast_to((along % b.row_period) < b.row_period // 2, (b.height, b.width))
        classmap[b.y : b.y + b.height, b.x : b.x + b.width] = np.where(
            on_row, index[b.vine_class], index[b.soil_class]
        )
        labels[b.y : b.y + b.height, b.x : b.x + b.width] = b.label

    data = spectra[classmap].transpose(2, 0, 1)  # (C, H, W)
    sigma = np.broadcast_to(np.asarray(spec.noise_sigma, dtype=np.float64), (len(spec.bands),))
    if (sigma > 0).any():
        rng = np.random.default_rng(spec.seed)
        data = data + rng.standard_normal(data.shape) * sigma[:, None, None]
        np.maximum(data, 0.0, out=data)
    stack = BandStack(tuple(spec.bands), data, {"source": "synthetic", "seed": str(spec.seed)})
    return stack, MaskRaster(labels, spec.resolved_num_classes)


def downsample_box(stack: BandStack, factor: int) -> BandStack:
    """Average non-overlapping ``factor x factor`` windows, per band."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    c, h, w = stack.data.shape
    if h % factor or w % factor:
        raise ValueError(f"{w}x{h} scene is not divisible by factor {factor}")
    if factor == 1:
        return stack
    blocks = stack.data.astype(np.float64).reshape(c, h // factor, factor, w // factor, factor)
    return BandStack(stack.bands, blocks.mean(axis=(2, 4)), stack.attrs)


def demo_scene_spec(
    width: int = 768,
    height: int = 768,
    n_blocks: int = 4,
    noise_sigma: float = 0.02,
    seed: int = 0,
    multiclass: bool = False,
    row_periods: Sequence[int] = (2, 3, 4),
) -> SceneSpec:
    """A reproducible layout: ``n_blocks`` vineyards on a jittered grid plus one lake.

    With ``multiclass=True`` alternating blocks use the ``vine_row_white``
    spectrum and mask label 2, giving a three-class red/white/background task.
    """
    rng = np.random.default_rng(seed)
    cols = int(np.ceil(np.sqrt(n_blocks)))
    rows = int(np.ceil(n_blocks / cols))
    cell_w, cell_h = width // cols, height // rows
    blocks = []
    for i in range(n_blocks):
        cx, cy = (i % cols) * cell_w, (i // cols) * cell_h
        bw = int(rng.integers(cell_w * 5 // 10, cell_w * 8 // 10))
        bh = int(rng.integers(cell_h * 5 // 10, cell_h * 8 // 10))
        bx = cx + int(rng.integers(0, cell_w - bw))
        by = cy + int(rng.integers(0, cell_h - bh))
        white = multiclass and i % 2 == 1
        blocks.append(
            Block(
                bx,
                by,
                bw,
                bh,
                row_period=int(row_periods[i % len(row_periods)]),
                row_orientation="horizontal" if i % 2 == 0 else "vertical",
                label=2 if white else 1,
                vine_class="vine_row_white" if white else "vine_row",
            )
        )
    # a lake in the gap of the first cell, clipped to the scene
    lake = Rect(0, 0, max(1, width // 16), max(1, height // 16))
    water = [] if any(lake.overlaps(b) for b in blocks) else [lake]
    return SceneSpec(
        width=width,
        height=height,
        blocks=blocks,
        water=water,
        noise_sigma=noise_sigma,
        seed=seed,
        num_classes=3 if multiclass else 2,
    )
