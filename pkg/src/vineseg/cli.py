"""Command-line entry point: ``vineseg <subcommand> [options]``.

Scene directories hold ``stack/`` (a band stack) and ``mask.pgm``. Every
subcommand accepts ``--config FILE`` (a JSON object whose keys are the
subcommand's option names, with dashes written as underscores); flags given
on the command line override values from the file, and unknown keys are
rejected. The fully resolved options are written next to the outputs as
``resolved_config.json`` (directory outputs) or ``<output>.config.json``
(file outputs), and can be fed back through ``--config`` to replay a run.

Exit status: 0 on success, 1 on invalid input or arguments, 2 on I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .models import ArchConfig, build_model, load_seg_model, save_seg_model
from .models.archs import MODEL_FORMAT as SEG_FORMAT
from .raster import (
    BandInfo,
    BandStack,
    MaskRaster,
    compute_ndvi,
    preprocess,
    read_band_stack,
    read_mask,
    write_band_stack,
    write_mask,
)
from .render import render_mask, render_probability
from .sampler import PatchSource, SplitManifest, flatten_pixels, grid_patches, sample_patches, split_patches
from .synth import demo_scene_spec, generate_scene, load_scene_spec, save_scene_spec
from .tabular import (
    ForestParams,
    TreeParams,
    load_model,
    save_model,
    train_decision_tree,
    train_logistic_regression,
    train_random_forest,
)
from .tabular import MODEL_FORMAT as TABULAR_FORMAT
from .training import (
    TrainConfig,
    evaluate_model,
    predict_scene,
    run_experiment_grid,
    train_model,
    write_reports_csv,
)

log = logging.getLogger("vineseg")

STACK_DIR = "stack"
MASK_FILE = "mask.pgm"
RESOLVED = "resolved_config.json"


class UsageError(ValueError):
    """Invalid arguments; reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# option registry: defaults live here so a config file can sit between them and the flags
# ---------------------------------------------------------------------------

_DEFAULTS: dict[str, dict[str, Any]] = {}
_HANDLERS: dict[str, Callable[[dict], None]] = {}


def _opt(parser, cmd: str, flag: str, default=None, **kw) -> None:
    dest = flag.lstrip("-").replace("-", "_")
    _DEFAULTS.setdefault(cmd, {})[dest] = default
    parser.add_argument(flag, dest=dest, default=argparse.SUPPRESS, **kw)


def _fractions(text: str) -> list[float]:
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"fractions must be comma-separated numbers, got {text!r}") from None
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vineseg", description="Vineyard segmentation from multispectral rasters.")
    parser.add_argument("--version", action="version", version=f"vineseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name: str, help_: str):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", default=None, help="JSON file with option values (flags override)")
        _opt(p, name, "--threads", 1, type=int, help="worker cap; results do not depend on it")
        return p

    p = command("synth", "Generate a synthetic scene directory (stack/ + mask.pgm).")
    _opt(p, "synth", "--spec", help="scene spec JSON; without it a demo layout is generated")
    _opt(p, "synth", "--out", required=False, help="output scene directory")
    _opt(p, "synth", "--width", 768, type=int)
    _opt(p, "synth", "--height", 768, type=int)
    _opt(p, "synth", "--n-blocks", 4, type=int)
    _opt(p, "synth", "--noise-sigma", 0.02, type=float)
    _opt(p, "synth", "--multiclass", False, action="store_true", help="red/white vine classes (3 labels)")
    _opt(p, "synth", "--seed", 0, type=int, help="layout and noise seed for the demo layout")

    p = command("ndvi", "Write the NDVI plane of a band stack as a one-band stack.")
    _opt(p, "ndvi", "--stack", help="band stack directory (or a scene directory)")
    _opt(p, "ndvi", "--out", help="output band stack directory")

    p = command("normalize", "Min-max normalize every band and append encoded NDVI.")
    _opt(p, "normalize", "--scene", help="input scene directory")
    _opt(p, "normalize", "--out", help="output scene directory")
    _opt(p, "normalize", "--no-ndvi", False, action="store_true", help="do not append the NDVI band")

    p = command("sample", "Sample square patches from scene directories into a manifest.")
    _opt(p, "sample", "--scene", None, action="append", help="scene directory (repeatable)")
    _opt(p, "sample", "--n", 2000, type=int, help="number of patches")
    _opt(p, "sample", "--size", 96, type=int, help="patch side in pixels")
    _opt(p, "sample", "--seed", 0, type=int)
    _opt(p, "sample", "--min-positive", 0.0, type=float, help="minimum share of non-zero mask pixels")
    _opt(p, "sample", "--grid", False, action="store_true", help="non-overlapping tiling instead of random draws")
    _opt(p, "sample", "--out", help="output manifest JSON")

    p = command("split", "Assign manifest patches to train/val/test.")
    _opt(p, "split", "--manifest", help="input manifest JSON")
    _opt(p, "split", "--fractions", [0.8, 0.1, 0.1], type=_fractions, help="train,val,test fractions")
    _opt(p, "split", "--seed", 0, type=int)
    _opt(p, "split", "--out", help="output manifest JSON")

    p = command("train-ml", "Train a per-pixel classifier on the train split.")
    _opt(p, "train-ml", "--manifest")
    _opt(p, "train-ml", "--model", "rf", choices=["dt", "rf", "lr"])
    _opt(p, "train-ml", "--n-trees", 100, type=int)
    _opt(p, "train-ml", "--max-depth", 12, type=int)
    _opt(p, "train-ml", "--min-samples-leaf", 1, type=int)
    _opt(p, "train-ml", "--max-features", "sqrt")
    _opt(p, "train-ml", "--max-rows", 50000, type=int, help="pixel rows drawn from the train split")
    _opt(p, "train-ml", "--lr", 0.5, type=float, help="logistic regression step size")
    _opt(p, "train-ml", "--epochs", 500, type=int, help="logistic regression iterations")
    _opt(p, "train-ml", "--seed", 0, type=int)
    _opt(p, "train-ml", "--out", help="output model directory")

    p = command("train-dl", "Train a segmentation network.")
    _opt(p, "train-dl", "--manifest")
    _opt(p, "train-dl", "--arch", "unet", choices=["unet", "resunet", "unetpp", "modsegnet"])
    _opt(p, "train-dl", "--depth", 4, type=int, help="resolution levels")
    _opt(p, "train-dl", "--filters", 16, type=int, help="filters at the first level")
    _opt(p, "train-dl", "--dropout", 0.0, type=float)
    _opt(p, "train-dl", "--upsample", "nearest", choices=["nearest", "transposed"])
    _opt(p, "train-dl", "--out-classes", None, type=int, help="1 for binary; defaults from the masks")
    _opt(p, "train-dl", "--lr", 1e-3, type=float)
    _opt(p, "train-dl", "--batch", 128, type=int)
    _opt(p, "train-dl", "--epochs", 100, type=int)
    _opt(p, "train-dl", "--patience", 10, type=int)
    _opt(p, "train-dl", "--max-steps", None, type=int)
    _opt(p, "train-dl", "--seed", 0, type=int)
    _opt(p, "train-dl", "--out", help="output model directory")

    p = command("eval", "Score a trained model on one split of a manifest.")
    _opt(p, "eval", "--model", help="model directory from train-ml or train-dl")
    _opt(p, "eval", "--manifest")
    _opt(p, "eval", "--split", "test", choices=["train", "val", "test"])
    _opt(p, "eval", "--threshold", 0.5, type=float)
    _opt(p, "eval", "--mode", "pooled", choices=["pooled", "per_patch"])
    _opt(p, "eval", "--out", help="output CSV report")

    p = command("grid", "Train and score a list of network configurations.")
    _opt(p, "grid", "--manifest")
    _opt(p, "grid", "--grid", help='JSON list of {"arch": {...}, "train": {...}} entries')
    _opt(p, "grid", "--split", "test", choices=["val", "test"])
    _opt(p, "grid", "--out", help="output CSV report")

    p = command("predict", "Sliding-window inference over a whole scene.")
    _opt(p, "predict", "--model")
    _opt(p, "predict", "--stack", help="band stack directory (or a scene directory)")
    _opt(p, "predict", "--tile", 96, type=int)
    _opt(p, "predict", "--stride", None, type=int, help="window step (default: half the tile)")
    _opt(p, "predict", "--threshold", 0.5, type=float)
    _opt(p, "predict", "--out", help="output directory (mask.pgm + probability/)")

    p = command("render", "Render a probability stack or a class mask as PGM/PNG.")
    _opt(p, "render", "--input", help="mask .pgm file or probability band stack directory")
    _opt(p, "render", "--band", 0, type=int, help="probability band to render")
    _opt(p, "render", "--out", help="output .pgm or .png")
    return parser


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def resolve_options(command: str, ns: argparse.Namespace) -> dict:
    defaults = _DEFAULTS[command]
    opts = dict(defaults)
    config_path = getattr(ns, "config", None)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path} is not valid JSON: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        doc = dict(doc)
        if doc.pop("subcommand", command) != command:
            raise UsageError("config file was written for a different subcommand")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        opts.update(doc)
    for key in defaults:
        if hasattr(ns, key):
            opts[key] = getattr(ns, key)
    return opts


def _require(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) in (None, [], "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _write_resolved(command: str, opts: dict, path: Path) -> None:
    path.write_text(json.dumps({"subcommand": command, **opts}, indent=2, sort_keys=True), encoding="utf-8")


def _resolved_beside(out: Path) -> Path:
    return out.with_name(out.name + ".config.json")


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------


def _stack_dir(path: str) -> Path:
    p = Path(path)
    return p / STACK_DIR if (p / STACK_DIR).is_dir() else p


def load_scene(path: str | Path) -> tuple[BandStack, MaskRaster]:
    path = Path(path)
    return read_band_stack(path / STACK_DIR), read_mask(path / MASK_FILE)


def write_scene(path: Path, stack: BandStack, mask: MaskRaster) -> None:
    path.mkdir(parents=True, exist_ok=True)
    write_band_stack(stack, path / STACK_DIR)
    write_mask(mask, path / MASK_FILE)


def _portable(scene_dir: Path, manifest_path: Path) -> str:
    """Scene path as stored in a manifest: relative to the manifest when it lies below it."""
    try:
        return str(scene_dir.relative_to(manifest_path.resolve().parent))
    except ValueError:
        return str(scene_dir)


def _source(manifest_path: str) -> PatchSource:
    manifest = SplitManifest.load(manifest_path)
    base = Path(manifest_path).parent
    scenes = {}
    for sid, d in manifest.scenes.items():
        p = Path(d)
        scenes[sid] = load_scene(p if p.is_absolute() else base / p)
    return PatchSource(scenes, manifest)


def load_any_model(path: str | Path):
    path = Path(path)
    meta = json.loads((path / "model.json").read_text(encoding="utf-8"))
    fmt = meta.get("format")
    if fmt == SEG_FORMAT:
        return load_seg_model(path)
    if fmt == TABULAR_FORMAT:
        return load_model(path / "model.json")
    raise ValueError(f"{path} does not hold a known model format ({fmt!r})")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(o: dict) -> None:
    _require(o, "out")
    if o["spec"]:
        spec = load_scene_spec(o["spec"])
    else:
        spec = demo_scene_spec(o["width"], o["height"], o["n_blocks"], o["noise_sigma"], o["seed"], o["multiclass"])
    stack, mask = generate_scene(spec)
    out = Path(o["out"])
    write_scene(out, stack, mask)
    save_scene_spec(spec, out / "scene.json")
    _write_resolved("synth", o, out / RESOLVED)
    log.info("wrote %dx%d scene with %d bands to %s", stack.width, stack.height, len(stack.bands), out)


def cmd_ndvi(o: dict) -> None:
    _require(o, "stack", "out")
    stack = read_band_stack(_stack_dir(o["stack"]))
    ndvi = compute_ndvi(stack)
    out = Path(o["out"])
    write_band_stack(BandStack((BandInfo("ndvi"),), ndvi[None], {"index": "ndvi"}), out)
    _write_resolved("ndvi", o, out / RESOLVED)


def cmd_normalize(o: dict) -> None:
    _require(o, "scene", "out")
    stack, mask = load_scene(o["scene"])
    out = Path(o["out"])
    write_scene(out, preprocess(stack, append_ndvi=not o["no_ndvi"]), mask)
    _write_resolved("normalize", o, out / RESOLVED)


def cmd_sample(o: dict) -> None:
    _require(o, "scene", "out")
    out = Path(o["out"])
    dims, masks, dirs = [], {}, {}
    for i, d in enumerate(o["scene"]):
        stack, mask = load_scene(d)
        sid = f"{Path(d).resolve().name}"
        if sid in dirs:
            sid = f"{sid}_{i}"
        dims.append((sid, (stack.width, stack.height)))
        masks[sid] = mask
        dirs[sid] = _portable(Path(d).resolve(), out)
    if o["grid"]:
        refs = grid_patches(dims, o["size"])
    else:
        refs = sample_patches(dims, o["n"], o["size"], o["seed"], masks, o["min_positive"])
    manifest = SplitManifest(refs, [None] * len(refs), o["seed"], scenes=dirs)
    manifest.save(out)
    _write_resolved("sample", o, _resolved_beside(out))
    log.info("sampled %d patches of %d px", len(refs), o["size"])


def cmd_split(o: dict) -> None:
    _require(o, "manifest", "out")
    src = SplitManifest.load(o["manifest"])
    manifest = split_patches(src.patches, o["fractions"], o["seed"])
    out = Path(o["out"])
    base = Path(o["manifest"]).resolve().parent
    manifest.scenes = {k: _portable((base / v).resolve(), out) for k, v in src.scenes.items()}
    manifest.save(out)
    _write_resolved("split", o, _resolved_beside(out))
    log.info("split counts %s", manifest.counts())


def cmd_train_ml(o: dict) -> None:
    _require(o, "manifest", "out")
    src = _source(o["manifest"])
    table = flatten_pixels(src.scenes, src.manifest, "train", o["max_rows"], o["seed"])
    mf = o["max_features"]
    mf = int(mf) if isinstance(mf, str) and mf.isdigit() else mf
    tree = TreeParams(max_depth=o["max_depth"], min_samples_leaf=o["min_samples_leaf"])
    if o["model"] == "dt":
        model = train_decision_tree(table, tree, n_classes=src.num_classes)
    elif o["model"] == "rf":
        model = train_random_forest(table, ForestParams(n_trees=o["n_trees"], max_features=mf, tree=tree, seed=o["seed"]))
    else:
        model = train_logistic_regression(table, lr=o["lr"], epochs=o["epochs"], seed=o["seed"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json")
    _write_resolved("train-ml", o, out / RESOLVED)
    log.info("trained %s on %d pixel rows", o["model"], len(table))


def _arch_and_train(o: dict, num_classes: int) -> tuple[ArchConfig, TrainConfig]:
    k = o["out_classes"]
    if k is None:
        k = 1 if num_classes == 2 else num_classes
    arch = ArchConfig(o["arch"], o["depth"], o["filters"], o["dropout"], out_classes=k, upsample=o["upsample"],
                      seed=o["seed"])
    train = TrainConfig(o["batch"], o["lr"], o["epochs"], o["patience"], o["seed"], max_steps=o["max_steps"])
    return arch, train


def cmd_train_dl(o: dict) -> None:
    _require(o, "manifest", "out")
    src = _source(o["manifest"])
    arch, cfg = _arch_and_train(o, src.num_classes)
    in_ch = next(iter(src.scenes.values()))[0].data.shape[0]
    arch = ArchConfig.from_dict({**arch.to_dict(), "in_channels": in_ch})
    model, history = train_model(build_model(arch), src, cfg)
    out = Path(o["out"])
    save_seg_model(model, out)
    history.write_csv(out / "history.csv")
    _write_resolved("train-dl", o, out / RESOLVED)
    log.info("best val dice %.4f at epoch %d (%s)", history.best_val_dice, history.best_epoch, history.stop_reason)


def cmd_eval(o: dict) -> None:
    _require(o, "model", "manifest", "out")
    model = load_any_model(o["model"])
    src = _source(o["manifest"])
    name = Path(o["model"]).name
    report = evaluate_model(model, src, o["split"], o["threshold"], o["mode"], model_id=name)
    out = Path(o["out"])
    write_reports_csv([report], out)
    _write_resolved("eval", o, _resolved_beside(out))
    log.info("%s %s dice %.4f", name, o["split"], report.dice)


def cmd_grid(o: dict) -> None:
    _require(o, "manifest", "grid", "out")
    entries = json.loads(Path(o["grid"]).read_text(encoding="utf-8"))
    if not isinstance(entries, list) or not entries:
        raise UsageError("grid file must hold a non-empty JSON list")
    src = _source(o["manifest"])
    in_ch = next(iter(src.scenes.values()))[0].data.shape[0]
    grid = []
    for e in entries:
        if set(e) - {"arch", "train"}:
            raise UsageError(f"grid entries take only 'arch' and 'train' keys, got {sorted(e)}")
        arch = ArchConfig.from_dict({"in_channels": in_ch, **e.get("arch", {})})
        grid.append((arch, TrainConfig.from_dict(e.get("train", {}))))
    reports = run_experiment_grid(grid, src, o["split"])
    out = Path(o["out"])
    write_reports_csv(reports, out)
    _write_resolved("grid", o, _resolved_beside(out))


def cmd_predict(o: dict) -> None:
    _require(o, "model", "stack", "out")
    model = load_any_model(o["model"])
    stack = read_band_stack(_stack_dir(o["stack"]))
    if o["stride"] is None:
        o["stride"] = max(o["tile"] // 2, 1)
    labels, prob = predict_scene(model, stack, o["tile"], o["stride"], o["threshold"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_mask(labels, out / MASK_FILE)
    bands = tuple(BandInfo(f"p{k}") for k in range(prob.shape[0]))
    write_band_stack(BandStack(bands, prob, {"kind": "probability"}), out / "probability")
    _write_resolved("predict", o, out / RESOLVED)


def cmd_render(o: dict) -> None:
    _require(o, "input", "out")
    src = Path(o["input"])
    out = Path(o["out"])
    if src.is_dir():
        stack = read_band_stack(_stack_dir(str(src)))
        if not 0 <= o["band"] < len(stack.bands):
            raise UsageError(f"--band {o['band']} out of range for {len(stack.bands)} bands")
        render_probability(stack.data[o["band"]], out)
    else:
        render_mask(read_mask(src), out)
    _write_resolved("render", o, _resolved_beside(out))


_HANDLERS.update(
    {
        "synth": cmd_synth,
        "ndvi": cmd_ndvi,
        "normalize": cmd_normalize,
        "sample": cmd_sample,
        "split": cmd_split,
        "train-ml": cmd_train_ml,
        "train-dl": cmd_train_dl,
        "eval": cmd_eval,
        "grid": cmd_grid,
        "predict": cmd_predict,
        "render": cmd_render,
    }
)


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("no subcommand given; expected one of " + ", ".join(_HANDLERS))
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(message)s")
        opts = resolve_options(ns.command, ns)
        _HANDLERS[ns.command](opts)
    except (OSError, EOFError) as exc:
        print(f"vineseg: I/O error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError, np.linalg.LinAlgError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"vineseg: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
