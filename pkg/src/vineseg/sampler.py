"""Patch sampling, train/val/test manifests and per-pixel tables."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .raster import BandStack, MaskRaster

SPLITS = ("train", "val", "test")
MANIFEST_FORMAT = "vineseg.manifest/1"
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class PatchRef:
    scene_id: str
    x: int
    y: int
    size: int


@dataclass
class SplitManifest:
    patches: list[PatchRef]
    assignment: list[str | None]
    seed: int
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    scenes: dict[str, str] = field(default_factory=dict)  # scene id -> directory, for the CLI

    def split(self, which: str) -> list[PatchRef]:
        if which not in SPLITS:
            raise SamplingError(f"unknown split {which!r}")
        return [p for p, a in zip(self.patches, self.assignment) if a == which]

    def indices(self, which: str) -> list[int]:
        return [i for i, a in enumerate(self.assignment) if a == which]

    def counts(self) -> dict[str, int]:
        return {s: sum(a == s for a in self.assignment) for s in SPLITS}

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "seed": self.seed,
            "fractions": list(self.fractions),
            "scenes": dict(self.scenes),
            "patches": [
                {"scene_id": p.scene_id, "x": p.x, "y": p.y, "size": p.size, "split": a}
                for p, a in zip(self.patches, self.assignment)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        if d.get("format") != MANIFEST_FORMAT:
            raise SamplingError(f"unsupported manifest format {d.get('format')!r}")
        patches = [PatchRef(e["scene_id"], int(e["x"]), int(e["y"]), int(e["size"])) for e in d["patches"]]
        assignment = [e.get("split") for e in d["patches"]]
        return cls(patches, assignment, int(d["seed"]), tuple(d["fractions"]), dict(d.get("scenes", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def sample_patches(
    scenes: Sequence[tuple[str, tuple[int, int]]],
    n: int,
    size: int = 96,
    seed: int = 0,
    masks: Mapping[str, MaskRaster] | None = None,
    min_positive_fraction: float = 0.0,
    max_attempts: int = 100,
) -> list[PatchRef]:
    """Draw ``n`` windows uniformly over all (scene, valid offset) pairs, with replacement.

    ``scenes`` holds ``(scene_id, (width, height))``. When
    ``min_positive_fraction > 0``, draws whose window has a smaller share of
    non-zero mask labels are rejected and redrawn (needs ``masks``).
    """
    if n < 1:
        raise SamplingError("n must be >= 1")
    if not scenes:
        raise SamplingError("no scenes to sample from")
    counts = []
    for sid, (w, h) in scenes:
        if w < size or h < size:
            raise SamplingError(f"scene {sid!r} ({w}x{h}) is smaller than patch size {size}")
        counts.append((w - size + 1) * (h - size + 1))
    if min_positive_fraction > 0 and masks is None:
        raise SamplingError("min_positive_fraction needs masks")
    offsets = np.cumsum([0] + counts)
    rng = np.random.default_rng(seed)

    def decode(flat: int) -> PatchRef:
        s = int(np.searchsorted(offsets, flat, side="right") - 1)
        sid, (w, _) = scenes[s]
        local = flat - offsets[s]
        nx = w - size + 1
        return PatchRef(sid, int(local % nx), int(local // nx), size)

    out: list[PatchRef] = []
    attempts = 0
    while len(out) < n:
        ref = decode(int(rng.integers(0, offsets[-1])))
        if min_positive_fraction > 0:
            window = masks[ref.scene_id].labels[ref.y : ref.y + size, ref.x : ref.x + size]
            if np.count_nonzero(window) < min_positive_fraction * size * size:
                attempts += 1
                if attempts > max_attempts * n:
                    raise SamplingError("could not find enough patches with the requested positive fraction")
                continue
        out.append(ref)
    return out


def grid_patches(scenes: Sequence[tuple[str, tuple[int, int]]], size: int = 96) -> list[PatchRef]:
    """Non-overlapping tiling of every scene; a leakage-free alternative to random sampling."""
    out = []
    for sid, (w, h) in scenes:
        if w < size or h < size:
            raise SamplingError(f"scene {sid!r} ({w}x{h}) is smaller than patch size {size}")
        for y in range(0, h - size + 1, size):
            for x in range(0, w - size + 1, size):
                out.append(PatchRef(sid, x, y, size))
    return out


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """floor(n * f) per split; the rounding remainder goes to train."""
    _check_fractions(fractions)
    counts = [math.floor(n * f + 1e-9) for f in fractions]
    counts[0] += n - sum(counts)
    return tuple(counts)


def _check_fractions(fractions: Sequence[float]) -> None:
    if len(fractions) != 3:
        raise SamplingError("fractions must give (train, val, test)")
    if any(f < 0 for f in fractions):
        raise SamplingError(f"fractions must be non-negative, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SamplingError(f"fractions must sum to 1, got {tuple(fractions)} (sum {sum(fractions):.6g})")


def split_patches(
    patches: Sequence[PatchRef], fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0
) -> SplitManifest:
    """Shuffle with a seeded permutation, then cut into train/val/test blocks."""
    _check_fractions(fractions)
    n_train, n_val, _ = split_counts(len(patches), fractions)
    order = np.random.default_rng(seed).permutation(len(patches))
    assignment: list[str | None] = [None] * len(patches)
    for rank, idx in enumerate(order):
        assignment[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return SplitManifest(list(patches), assignment, seed, tuple(float(f) for f in fractions))


def extract_patch(stack: BandStack, mask: MaskRaster, ref: PatchRef) -> tuple[np.ndarray, np.ndarray]:
    """Channel-major copy of the window plus its labels."""
    if (stack.width, stack.height) != (mask.width, mask.height):
        raise SamplingError("stack and mask dimensions differ")
    if ref.x < 0 or ref.y < 0 or ref.x + ref.size > stack.width or ref.y + ref.size > stack.height:
        raise SamplingError(f"patch {ref} lies outside the {stack.width}x{stack.height} scene")
    sl = (slice(ref.y, ref.y + ref.size), slice(ref.x, ref.x + ref.size))
    return stack.data[(slice(None),) + sl].copy(), mask.labels[sl].astype(np.int64)


@dataclass
class PixelTable:
    features: np.ndarray  # (rows, C) float32
    labels: np.ndarray  # (rows,) int64
    provenance: np.ndarray  # (rows,) index into ``refs``
    refs: list[PatchRef] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_arrays(cls, features, labels) -> "PixelTable":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or len(features) != len(labels):
            raise SamplingError("features must be (rows, C) with one label per row")
        return cls(features, labels, np.zeros(len(labels), dtype=np.int64), [])


def flatten_pixels(
    scenes: Mapping[str, tuple[BandStack, MaskRaster]],
    manifest: SplitManifest,
    split: str,
    max_rows: int | None = None,
    seed: int = 0,
) -> PixelTable:
    """One row per pixel of every patch in ``split``, optionally subsampled.

    Subsampling draws ``max_rows`` distinct pixels uniformly from the whole
    split (seeded) and keeps them in patch-then-raster order.
    """
    refs = manifest.split(split)
    if not refs:
        raise SamplingError(f"split {split!r} is empty")
    per_patch = np.array([r.size * r.size for r in refs], dtype=np.int64)
    total = int(per_patch.sum())
    if max_rows is not None and max_rows < total:
        rows = np.sort(np.random.default_rng(seed).choice(total, size=max_rows, replace=False))
    else:
        rows = np.arange(total)
    starts = np.concatenate([[0], np.cumsum(per_patch)])
    owner = np.searchsorted(starts, rows, side="right") - 1
    n_ch = next(iter(scenes.values()))[0].data.shape[0]
    features = np.empty((len(rows), n_ch), dtype=np.float32)
    labels = np.empty(len(rows), dtype=np.int64)
    for p in np.unique(owner):
        sel = owner == p
        ref = refs[p]
        stack, mask = scenes[ref.scene_id]
        local = rows[sel] - starts[p]
        yy = ref.y + local // ref.size
        xx = ref.x + local % ref.size
        features[sel] = stack.data[:, yy, xx].T
        labels[sel] = mask.labels[yy, xx]
    return PixelTable(features, labels, owner.astype(np.int64), list(refs))


class PatchSource:
    """Lazily materialized patches for one manifest, backed by in-memory scenes."""

    def __init__(self, scenes: Mapping[str, tuple[BandStack, MaskRaster]], manifest: SplitManifest):
        self.scenes = dict(scenes)
        self.manifest = manifest
        missing = {p.scene_id for p in manifest.patches} - set(self.scenes)
        if missing:
            raise SamplingError(f"manifest references unknown scenes {sorted(missing)}")
        self.num_classes = max(m.num_classes for _, m in self.scenes.values())

    def indices(self, split: str) -> list[int]:
        return self.manifest.indices(split)

    def batch(self, indices: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for i in indices:
            ref = self.manifest.patches[i]
            stack, mask = self.scenes[ref.scene_id]
            x, y = extract_patch(stack, mask, ref)
            xs.append(x)
            ys.append(y)
        return np.stack(xs), np.stack(ys)
