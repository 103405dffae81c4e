import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vineseg.raster import BandInfo, BandStack, MaskRaster
from vineseg.sampler import (
    PatchRef,
    PatchSource,
    SamplingError,
    SplitManifest,
    extract_patch,
    flatten_pixels,
    grid_patches,
    sample_patches,
    split_counts,
    split_patches,
)

THREE = [("a", (768, 768)), ("b", (500, 300)), ("c", (96, 200))]


def test_full_scale_patch_count():
    refs = sample_patches(THREE, 20000, 96, seed=1)
    assert len(refs) == 20000
    assert {r.scene_id for r in refs} == {"a", "b", "c"}
    dims = dict(THREE)
    for r in refs[:2000]:
        w, h = dims[r.scene_id]
        assert 0 <= r.x <= w - 96 and 0 <= r.y <= h - 96


def test_single_offset_scene():
    refs = sample_patches([("s", (96, 96))], 5, 96, seed=3)
    assert refs == [PatchRef("s", 0, 0, 96)] * 5


def test_sampling_deterministic_and_errors():
    assert sample_patches(THREE, 50, 64, seed=9) == sample_patches(THREE, 50, 64, seed=9)
    assert sample_patches(THREE, 50, 64, seed=9) != sample_patches(THREE, 50, 64, seed=10)
    with pytest.raises(SamplingError):
        sample_patches([("s", (50, 200))], 1, 96)
    with pytest.raises(SamplingError):
        sample_patches(THREE, 0, 96)


def test_sampling_is_uniform_over_offsets():
    # scene "a" has 4 offsets, "b" has 1; expect ~80% from "a"
    refs = sample_patches([("a", (5, 5)), ("b", (4, 4))], 20000, 4, seed=0)
    share = sum(r.scene_id == "a" for r in refs) / len(refs)
    assert abs(share - 0.8) < 0.015


def test_min_positive_fraction_filter():
    labels = np.zeros((20, 20), dtype=np.uint8)
    labels[:10, :10] = 1
    refs = sample_patches([("s", (20, 20))], 30, 8, seed=0, masks={"s": MaskRaster(labels)}, min_positive_fraction=0.5)
    for r in refs:
        assert labels[r.y : r.y + 8, r.x : r.x + 8].mean() >= 0.5


def test_full_scale_split_counts():
    refs = [PatchRef("s", i, 0, 96) for i in range(20000)]
    m = split_patches(refs, (0.8, 0.1, 0.1), seed=0)
    assert m.counts() == {"train": 16000, "val": 2000, "test": 2000}


def test_small_split_counts_and_guard():
    m = split_patches([PatchRef("s", i, 0, 4) for i in range(10)], seed=5)
    assert m.counts() == {"train": 8, "val": 1, "test": 1}
    with pytest.raises(SamplingError, match="sum to 1"):
        split_patches([PatchRef("s", 0, 0, 4)], (0.8, 0.1, 0.2))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 300), st.integers(0, 2**32 - 1),
       st.sampled_from([(0.8, 0.1, 0.1), (0.7, 0.2, 0.1), (1.0, 0.0, 0.0), (0.34, 0.33, 0.33)]))
def test_split_is_partition_with_rounding_rule(n, seed, fractions):
    refs = [PatchRef("s", i, 0, 1) for i in range(n)]
    m = split_patches(refs, fractions, seed)
    counts = m.counts()
    assert sum(counts.values()) == n
    assert all(a in ("train", "val", "test") for a in m.assignment)
    assert counts["val"] == int(np.floor(n * fractions[1] + 1e-9))
    assert counts["test"] == int(np.floor(n * fractions[2] + 1e-9))
    assert (counts["train"], counts["val"], counts["test"]) == split_counts(n, fractions)
    again = split_patches(refs, fractions, seed)
    assert again.assignment == m.assignment


def test_manifest_roundtrip(tmp_path):
    refs = sample_patches(THREE, 40, 96, seed=2)
    m = split_patches(refs, seed=7)
    m.scenes = {"a": "/x/a"}
    m.save(tmp_path / "m.json")
    back = SplitManifest.load(tmp_path / "m.json")
    assert back.patches == m.patches and back.assignment == m.assignment
    assert back.seed == 7 and back.fractions == (0.8, 0.1, 0.1) and back.scenes == m.scenes
    back.save(tmp_path / "n.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "n.json").read_bytes()


def test_grid_patches_disjoint():
    refs = grid_patches([("s", (200, 100))], 48)
    assert len(refs) == 4 * 2
    cells = {(r.x, r.y) for r in refs}
    assert len(cells) == len(refs)


# ---------------------------------------------------------------- extraction


def make_scene(c=3, h=6, w=6):
    data = np.arange(c * h * w, dtype=np.float32).reshape(c, h, w)
    stack = BandStack(tuple(BandInfo(f"b{i}") for i in range(c)), data)
    labels = (np.arange(h * w).reshape(h, w) % 2).astype(np.uint8)
    return stack, MaskRaster(labels)


def test_extract_full_and_corner():
    stack, mask = make_scene()
    x, y = extract_patch(stack, mask, PatchRef("s", 0, 0, 6))
    np.testing.assert_array_equal(x, stack.data)
    np.testing.assert_array_equal(y, mask.labels)
    x, y = extract_patch(stack, mask, PatchRef("s", 2, 2, 4))
    np.testing.assert_array_equal(x, stack.data[:, 2:, 2:])
    with pytest.raises(SamplingError):
        extract_patch(stack, mask, PatchRef("s", 3, 0, 4))


def test_extract_returns_independent_copies():
    stack, mask = make_scene()
    a, _ = extract_patch(stack, mask, PatchRef("s", 0, 0, 4))
    b, _ = extract_patch(stack, mask, PatchRef("s", 1, 1, 4))
    a[:] = -1
    np.testing.assert_array_equal(b, stack.data[:, 1:5, 1:5])


def test_flatten_counts_and_cap():
    stack, mask = make_scene(c=3, h=2, w=2)
    m = SplitManifest([PatchRef("s", 0, 0, 2)], ["train"], 0)
    t = flatten_pixels({"s": (stack, mask)}, m, "train")
    assert t.features.shape == (4, 3)
    np.testing.assert_array_equal(t.features[1], stack.data[:, 0, 1])
    np.testing.assert_array_equal(t.labels, mask.labels.ravel())
    t2 = flatten_pixels({"s": (stack, mask)}, m, "train", max_rows=2, seed=3)
    t3 = flatten_pixels({"s": (stack, mask)}, m, "train", max_rows=2, seed=3)
    assert len(t2) == 2
    np.testing.assert_array_equal(t2.features, t3.features)
    with pytest.raises(SamplingError):
        flatten_pixels({"s": (stack, mask)}, m, "test")


def test_flatten_uncapped_rows_equal_sum_of_sizes():
    stack, mask = make_scene(c=2, h=10, w=10)
    refs = sample_patches([("s", (10, 10))], 7, 4, seed=1)
    m = split_patches(refs, (1.0, 0.0, 0.0), seed=0)
    t = flatten_pixels({"s": (stack, mask)}, m, "train")
    assert len(t) == 7 * 16
    assert t.provenance.max() == 6


def test_flatten_background_patch():
    stack, _ = make_scene()
    mask = MaskRaster(np.zeros((6, 6), dtype=np.uint8))
    m = SplitManifest([PatchRef("s", 1, 1, 3)], ["val"], 0)
    assert not flatten_pixels({"s": (stack, mask)}, m, "val").labels.any()


def test_patch_source_batches():
    stack, mask = make_scene()
    m = SplitManifest([PatchRef("s", 0, 0, 2), PatchRef("s", 2, 2, 2)], ["train", "test"], 0)
    src = PatchSource({"s": (stack, mask)}, m)
    x, y = src.batch(src.indices("train") + src.indices("test"))
    assert x.shape == (2, 3, 2, 2) and y.shape == (2, 2, 2)
