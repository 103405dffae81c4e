import json

import numpy as np
import pytest
from PIL import Image

from vineseg.cli import dispatch
from vineseg.raster import BandInfo, BandStack, MaskRaster, read_band_stack, read_mask, read_pgm, write_band_stack, write_mask
from vineseg.render import quantize_probability
from vineseg.sampler import SplitManifest


def run(*argv):
    return dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> normalize -> sample -> split on a small demo scene."""
    root = tmp_path_factory.mktemp("ws")
    assert run("synth", "--out", root / "raw", "--width", 128, "--height", 128, "--n-blocks", 2, "--seed", 3) == 0
    assert run("normalize", "--scene", root / "raw", "--out", root / "scene") == 0
    assert run("sample", "--scene", root / "scene", "--n", 100, "--size", 32, "--seed", 7,
               "--out", root / "patches.json") == 0
    assert run("split", "--manifest", root / "patches.json", "--fractions", "0.6,0.2,0.2", "--seed", 1,
               "--out", root / "split.json") == 0
    return root


def test_pipeline_outputs(workspace):
    raw = read_band_stack(workspace / "raw" / "stack")
    assert (raw.width, raw.height, len(raw.bands)) == (128, 128, 12)
    scene = read_band_stack(workspace / "scene" / "stack")
    assert scene.names[-1] == "ndvi" and scene.data.max() <= 1
    patches = SplitManifest.load(workspace / "patches.json")
    assert len(patches.patches) == 100 and {p.size for p in patches.patches} == {32}
    split = SplitManifest.load(workspace / "split.json")
    assert split.counts() == {"train": 60, "val": 20, "test": 20}
    for name in ("raw/resolved_config.json", "patches.json.config.json", "split.json.config.json"):
        assert (workspace / name).exists()


def test_resolved_config_replays(workspace, tmp_path):
    cfg = workspace / "patches.json.config.json"
    # the stored scene path is absolute-or-relative to where it was run; replay from the same inputs
    assert run("sample", "--config", cfg, "--out", tmp_path / "again.json") == 0
    a = SplitManifest.load(workspace / "patches.json")
    b = SplitManifest.load(tmp_path / "again.json")
    assert a.patches == b.patches


def test_config_precedence_and_unknown_keys(workspace, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": [str(workspace / "scene")], "n": 5, "size": 16}))
    assert run("sample", "--config", cfg, "--n", 9, "--out", tmp_path / "m.json") == 0
    m = SplitManifest.load(tmp_path / "m.json")
    assert len(m.patches) == 9 and m.patches[0].size == 16
    cfg.write_text(json.dumps({"scene": [str(workspace / "scene")], "patches": 5}))
    assert run("sample", "--config", cfg, "--out", tmp_path / "m2.json") == 1
    assert "unknown config keys" in capsys.readouterr().err
    assert not (tmp_path / "m2.json").exists()


def test_fraction_guard(workspace, tmp_path, capsys):
    code = run("split", "--manifest", workspace / "patches.json", "--fractions", "0.8,0.1,0.2",
               "--out", tmp_path / "s.json")
    assert code == 1
    err = capsys.readouterr().err
    assert "sum to 1" in err and err.count("\n") == 1
    assert not (tmp_path / "s.json").exists()


def test_unknown_subcommand(capsys):
    assert run("train-xl") == 1
    assert run() == 1
    assert capsys.readouterr().err.count("\n") == 2


def test_missing_input_is_io_error(tmp_path, capsys):
    assert run("ndvi", "--stack", tmp_path / "nope", "--out", tmp_path / "n") == 2
    assert "I/O" in capsys.readouterr().err


def test_missing_required_option(capsys):
    assert run("split", "--fractions", "0.5,0.25,0.25") == 1
    assert "--manifest" in capsys.readouterr().err


def test_ndvi_command(workspace, tmp_path):
    assert run("ndvi", "--stack", workspace / "raw", "--out", tmp_path / "ndvi") == 0
    nd = read_band_stack(tmp_path / "ndvi")
    assert nd.names == ["ndvi"] and nd.data.min() >= -1 and nd.data.max() <= 1


def test_train_ml_eval_predict(workspace, tmp_path):
    assert run("train-ml", "--manifest", workspace / "split.json", "--model", "rf", "--n-trees", 3,
               "--max-depth", 4, "--max-rows", 2000, "--out", tmp_path / "rf") == 0
    assert run("eval", "--model", tmp_path / "rf", "--manifest", workspace / "split.json",
               "--out", tmp_path / "rf.csv") == 0
    rows = (tmp_path / "rf.csv").read_text().splitlines()
    assert rows[0].startswith("model,split,dice") and rows[1].startswith("rf,test,")
    assert run("predict", "--model", tmp_path / "rf", "--stack", workspace / "scene", "--tile", 32, "--stride", 16,
               "--out", tmp_path / "pred") == 0
    mask = read_mask(tmp_path / "pred" / "mask.pgm")
    assert mask.labels.shape == (128, 128)
    for kind in ("dt", "lr"):
        assert run("train-ml", "--manifest", workspace / "split.json", "--model", kind, "--max-rows", 500,
                   "--epochs", 20, "--out", tmp_path / kind) == 0


def test_train_dl_grid_point_accepted(workspace, tmp_path):
    assert run("train-dl", "--manifest", workspace / "split.json", "--arch", "resunet", "--lr", "0.0005",
               "--batch", 128, "--depth", 2, "--filters", 2, "--epochs", 1, "--out", tmp_path / "net") == 0
    cfg = json.loads((tmp_path / "net" / "resolved_config.json").read_text())
    assert cfg["lr"] == 0.0005 and cfg["batch"] == 128 and cfg["subcommand"] == "train-dl"
    assert (tmp_path / "net" / "history.csv").read_text().startswith("epoch,steps,train_loss,val_dice")
    assert run("eval", "--model", tmp_path / "net", "--manifest", workspace / "split.json", "--split", "val",
               "--out", tmp_path / "net.csv") == 0
    assert run("predict", "--model", tmp_path / "net", "--stack", workspace / "scene", "--tile", 32,
               "--out", tmp_path / "pred") == 0
    prob = read_band_stack(tmp_path / "pred" / "probability")
    assert prob.data.shape == (1, 128, 128)


def test_train_dl_deterministic(workspace, tmp_path):
    args = ["train-dl", "--manifest", workspace / "split.json", "--depth", 2, "--filters", 2, "--batch", 16,
            "--max-steps", 3, "--seed", 4]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    for name in ("weights.f32", "history.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_grid_command(workspace, tmp_path):
    entries = [
        {"arch": {"arch": "unet", "depth": 2, "base_filters": 2}, "train": {"batch_size": 16, "max_steps": 2}},
        {"arch": {"arch": "unetpp", "depth": 2, "base_filters": 2}, "train": {"batch_size": 16, "max_steps": 2}},
    ]
    (tmp_path / "grid.json").write_text(json.dumps(entries))
    assert run("grid", "--manifest", workspace / "split.json", "--grid", tmp_path / "grid.json",
               "--out", tmp_path / "grid.csv") == 0
    rows = (tmp_path / "grid.csv").read_text().splitlines()
    assert len(rows) == 3
    (tmp_path / "bad.json").write_text(json.dumps([{"arch": {"arch": "unet", "filters": 2}}]))
    assert run("grid", "--manifest", workspace / "split.json", "--grid", tmp_path / "bad.json",
               "--out", tmp_path / "bad.csv") == 1


# ---------------------------------------------------------------- render


def test_quantization_rule():
    assert quantize_probability(np.array([0.0, 0.5, 1.0, 1 / 255 * 0.5])).tolist() == [0, 128, 255, 1]


def test_render_half_probability(tmp_path):
    stack = BandStack((BandInfo("p0"),), np.full((1, 6, 5), 0.5))
    write_band_stack(stack, tmp_path / "prob")
    for ext in ("pgm", "png"):
        assert run("render", "--input", tmp_path / "prob", "--out", tmp_path / f"r.{ext}") == 0
    pixels, _ = read_pgm(tmp_path / "r.pgm")
    assert pixels.shape == (6, 5) and np.all(pixels == 128)
    assert np.all(np.asarray(Image.open(tmp_path / "r.png")) == 128)


def test_render_binary_mask_two_colors(tmp_path):
    write_mask(MaskRaster(np.array([[0, 1, 1], [1, 0, 0]]), 2), tmp_path / "m.pgm")
    assert run("render", "--input", tmp_path / "m.pgm", "--out", tmp_path / "m.png") == 0
    rgb = np.asarray(Image.open(tmp_path / "m.png").convert("RGB")).reshape(-1, 3)
    assert len({tuple(c) for c in rgb}) == 2
    assert run("render", "--input", tmp_path / "m.pgm", "--out", tmp_path / "g.pgm") == 0
    assert set(np.unique(read_pgm(tmp_path / "g.pgm")[0])) == {0, 255}


def test_render_is_byte_identical(tmp_path):
    write_mask(MaskRaster(np.array([[0, 2], [1, 0]]), 3), tmp_path / "m.pgm")
    for name in ("a.png", "b.png"):
        assert run("render", "--input", tmp_path / "m.pgm", "--out", tmp_path / name) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_render_rejects_unknown_format(tmp_path):
    write_mask(MaskRaster(np.zeros((2, 2), dtype=np.uint8)), tmp_path / "m.pgm")
    assert run("render", "--input", tmp_path / "m.pgm", "--out", tmp_path / "m.jpg") == 1
