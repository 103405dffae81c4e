"""Training loop, dice-based evaluation, experiment grids and tiled scene inference."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import AdamState, adam_step, dice_loss
from .models import ArchConfig, SegModel, build_model
from .raster import BandStack, MaskRaster
from .sampler import PatchSource

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    loss: str = "dice"
    dice_smooth: float = 1.0
    # optional compute budget and early exit; None disables
    max_steps: int | None = None
    target_dice: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be > 0")
        if self.epochs < 1 or self.early_stop_patience < 1:
            raise TrainingError("epochs and early_stop_patience must be >= 1")
        if self.loss != "dice":
            raise TrainingError(f"unsupported loss {self.loss!r}; only 'dice' is implemented")
        if self.max_steps is not None and self.max_steps < 1:
            raise TrainingError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise TrainingError(f"unknown TrainConfig keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def dice_coefficient(pred_labels, target_labels, cls: int = 1) -> float:
    """2|P & T| / (|P| + |T|) for membership in ``cls``; 1.0 when both sets are empty."""
    p = np.asarray(pred_labels)
    t = np.asarray(target_labels)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    pm, tm = p == cls, t == cls
    denom = int(pm.sum()) + int(tm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pm, tm).sum()) / denom


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


@dataclass
class Confusion:
    """Per-class true-positive / false-positive / false-negative pixel counts."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "Confusion":
        return cls(np.zeros(k, np.int64), np.zeros(k, np.int64), np.zeros(k, np.int64))

    def add(self, pred: np.ndarray, target: np.ndarray) -> None:
        k = len(self.tp)
        pair = np.bincount(target.ravel().astype(np.int64) * k + pred.ravel(), minlength=k * k).reshape(k, k)
        diag = np.diag(pair)
        self.tp += diag
        self.fp += pair.sum(axis=0) - diag
        self.fn += pair.sum(axis=1) - diag

    def dice(self) -> list[float]:
        return [_ratio(2 * int(t), 2 * int(t) + int(p) + int(n)) for t, p, n in zip(self.tp, self.fp, self.fn)]

    def precision(self) -> list[float]:
        return [_ratio(int(t), int(t) + int(p)) for t, p in zip(self.tp, self.fp)]

    def recall(self) -> list[float]:
        return [_ratio(int(t), int(t) + int(n)) for t, n in zip(self.tp, self.fn)]


@dataclass
class MetricsReport:
    """Binary reports describe the positive class; multi-class reports average over all K classes."""

    model_id: str
    split: str
    dice: float
    precision: float
    recall: float
    per_class_dice: list[float]
    threshold: float
    num_classes: int
    mode: str = "pooled"
    n_pixels: int = 0

    CSV_FIELDS = ("model", "split", "dice", "precision", "recall", "per_class_dice", "threshold", "mode", "n_pixels")

    def to_row(self) -> dict:
        return {
            "model": self.model_id,
            "split": self.split,
            "dice": repr(float(self.dice)),
            "precision": repr(float(self.precision)),
            "recall": repr(float(self.recall)),
            "per_class_dice": ";".join(repr(float(d)) for d in self.per_class_dice),
            "threshold": repr(float(self.threshold)),
            "mode": self.mode,
            "n_pixels": str(self.n_pixels),
        }


def write_reports_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=MetricsReport.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.to_row())


# ---------------------------------------------------------------------------
# model-agnostic probabilities
# ---------------------------------------------------------------------------


def output_channels(model) -> int:
    if isinstance(model, SegModel):
        return model.config.out_classes
    k = model.n_classes
    return 1 if k == 2 else k


def predict_probabilities(model, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """N x C x H x W inputs -> N x K' x H x W probabilities (K' = 1 for binary).

    Segmentation networks run in eval mode; tabular models classify every
    pixel independently from its channel vector.
    """
    x = np.asarray(x)
    n, c, h, w = x.shape
    if isinstance(model, SegModel):
        model.eval()
        parts = [model.predict(x[i : i + batch_size]) for i in range(0, n, batch_size)]
        return np.concatenate(parts, axis=0)
    rows = x.transpose(0, 2, 3, 1).reshape(-1, c)
    proba = model.predict_proba(rows)
    if proba.shape[1] == 2:
        proba = proba[:, 1:]
    return proba.reshape(n, h, w, -1).transpose(0, 3, 1, 2)


def probabilities_to_labels(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary: 1 where p > threshold. Multi-class: argmax over the channel axis."""
    if prob.shape[1] == 1:
        return (prob[:, 0] > threshold).astype(np.int64)
    return prob.argmax(axis=1).astype(np.int64)


def _target_labels(y: np.ndarray, k_out: int) -> np.ndarray:
    # a single-channel head treats every non-zero class as foreground
    return (y != 0).astype(np.int64) if k_out == 1 else y.astype(np.int64)


def evaluate_model(
    model,
    source: PatchSource,
    split: str = "test",
    threshold: float = 0.5,
    mode: str = "pooled",
    model_id: str = "model",
    batch_size: int = 16,
) -> MetricsReport:
    """Threshold or argmax predictions on ``split`` and score them against the masks.

    ``mode="pooled"`` sums confusion counts over every pixel of the split;
    ``mode="per_patch"`` scores each patch alone and averages.
    """
    if mode not in ("pooled", "per_patch"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    idx = source.indices(split)
    if not idx:
        raise TrainingError(f"split {split!r} is empty")
    k_out = output_channels(model)
    k = 2 if k_out == 1 else k_out
    total = Confusion.zeros(k)
    per_patch: list[Confusion] = []
    n_pixels = 0
    for start in range(0, len(idx), batch_size):
        x, y = source.batch(idx[start : start + batch_size])
        pred = probabilities_to_labels(predict_probabilities(model, x, batch_size), threshold)
        target = _target_labels(y, k_out)
        if target.max(initial=0) >= k:
            raise TrainingError(f"mask labels exceed the model's {k} classes")
        n_pixels += target.size
        if mode == "pooled":
            total.add(pred, target)
        else:
            for p, t in zip(pred, target):
                c = Confusion.zeros(k)
                c.add(p, t)
                per_patch.append(c)

    def summarize(c: Confusion) -> tuple[float, float, float, list[float]]:
        dice, prec, rec = c.dice(), c.precision(), c.recall()
        if k_out == 1:
            return dice[1], prec[1], rec[1], dice
        return float(np.mean(dice)), float(np.mean(prec)), float(np.mean(rec)), dice

    if mode == "pooled":
        d, p, r, per_class = summarize(total)
    else:
        stats = [summarize(c) for c in per_patch]
        d, p, r = (float(np.mean([s[i] for s in stats])) for i in range(3))
        per_class = [float(v) for v in np.mean([s[3] for s in stats], axis=0)]
    return MetricsReport(model_id, split, float(d), float(p), float(r), [float(v) for v in per_class],
                         threshold, k, mode, n_pixels)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_loss: float
    val_dice: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_dice: float = float("nan")
    stop_reason: str = ""

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "steps", "train_loss", "val_dice"])
            for r in self.records:
                w.writerow([r.epoch, r.steps, repr(r.train_loss), repr(r.val_dice)])


def encode_targets(y: np.ndarray, k_out: int, dtype) -> np.ndarray:
    """N x H x W labels -> N x K' x H x W {0,1} targets matching the model head."""
    if k_out == 1:
        return (y != 0).astype(dtype)[:, None]
    if y.max(initial=0) >= k_out:
        raise TrainingError(f"mask labels exceed the model's {k_out} output classes")
    return (y[:, None] == np.arange(k_out)[None, :, None, None]).astype(dtype)


def train_model(
    model: SegModel,
    source: PatchSource,
    cfg: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[SegModel, TrainHistory]:
    """Adam on the dice loss with per-epoch validation and early stopping.

    Each epoch visits the train split in a fresh seeded order. Training stops
    at ``cfg.epochs``, after ``early_stop_patience`` epochs without a strict
    val-dice improvement, once ``max_steps`` optimizer steps have run, or
    when val dice reaches ``target_dice``. The weights (and batchnorm
    statistics) of the best validation epoch are restored before returning.
    """
    train_idx = np.array(source.indices("train"))
    if len(train_idx) == 0 or not source.indices("val"):
        raise TrainingError("training needs non-empty train and val splits")
    k_out = model.config.out_classes
    if k_out != 1 and k_out < source.num_classes:
        raise TrainingError(f"model has {k_out} outputs but the masks have {source.num_classes} classes")
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    model.reseed_dropout([cfg.seed, 1])
    params = model.parameters()
    opt = AdamState.for_params(params)
    history = TrainHistory()
    best_state = model.state_dict()
    best = -np.inf
    stale = 0
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = shuffle_rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            x, y = source.batch(order[start : start + cfg.batch_size])
            target = encode_targets(y, k_out, model.dtype)
            model.zero_grad()
            loss = dice_loss(model(x), target, cfg.dice_smooth, per_channel=k_out > 1)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"loss became non-finite ({value}) at epoch {epoch}, step {step}")
            loss.backward()
            adam_step(params, opt, cfg.learning_rate)
            step += 1
            losses.append(value)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        history.step_losses += losses
        val = evaluate_model(model, source, "val", batch_size=max(cfg.batch_size, 1)).dice
        rec = EpochRecord(epoch, step, float(np.mean(losses)), val)
        history.records.append(rec)
        log.info("epoch %d steps %d loss %.5f val dice %.5f", epoch, step, rec.train_loss, val)
        if on_epoch is not None:
            on_epoch(rec)
        if val > best:
            best, stale = val, 0
            best_state = model.state_dict()
            history.best_epoch, history.best_val_dice = epoch, val
        else:
            stale += 1
        if cfg.target_dice is not None and val >= cfg.target_dice:
            history.stop_reason = "target_dice"
            break
        if stale >= cfg.early_stop_patience:
            history.stop_reason = "patience"
            break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            history.stop_reason = "max_steps"
            break
    else:
        history.stop_reason = "epochs"
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def model_id(arch: ArchConfig, cfg: TrainConfig) -> str:
    return (
        f"{arch.arch}-d{arch.depth}-f{arch.base_filters}-do{arch.dropout_rate:g}"
        f"-lr{cfg.learning_rate:g}-s{arch.seed}.{cfg.seed}"
    )


def run_experiment_grid(
    grid: Sequence[tuple[ArchConfig, TrainConfig]],
    source: PatchSource,
    split: str = "test",
) -> list[MetricsReport]:
    """Train and score every entry, then sort by dice (best first, ties keep grid order).

    Each entry draws all of its randomness from its own configs' seeds, so
    entries are independent of each other and of their position in the grid.
    """
    reports = []
    for arch, cfg in grid:
        model, _ = train_model(build_model(arch), source, cfg)
        reports.append(evaluate_model(model, source, split, model_id=model_id(arch, cfg)))
    order = sorted(range(len(reports)), key=lambda i: (-reports[i].dice, i))
    return [reports[i] for i in order]


# ---------------------------------------------------------------------------
# whole-scene inference
# ---------------------------------------------------------------------------


def tile_origins(length: int, tile: int, stride: int) -> list[int]:
    """Window starts covering [0, length): regular steps plus one final window flush with the border."""
    if length < tile:
        raise ValueError(f"scene dimension {length} is smaller than the tile size {tile}")
    if not 1 <= stride <= tile:
        raise ValueError(f"stride must lie in [1, tile={tile}], got {stride}")
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def predict_scene(
    model,
    stack: BandStack,
    tile: int = 96,
    stride: int = 48,
    threshold: float = 0.5,
    batch_size: int = 8,
) -> tuple[MaskRaster, np.ndarray]:
    """Sliding-window inference; overlapping windows are averaged with equal weight.

    Returns the label raster and the K' x H x W probability raster.
    """
    h, w = stack.height, stack.width
    origins = [(y, x) for y in tile_origins(h, tile, stride) for x in tile_origins(w, tile, stride)]
    k_out = output_channels(model)
    acc = np.zeros((k_out, h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start : start + batch_size]
        x = np.stack([stack.data[:, y : y + tile, x0 : x0 + tile] for y, x0 in chunk])
        prob = predict_probabilities(model, x, batch_size)
        for (y, x0), p in zip(chunk, prob):
            acc[:, y : y + tile, x0 : x0 + tile] += p
            count[y : y + tile, x0 : x0 + tile] += 1
    prob = (acc / count).astype(np.float32)
    labels = probabilities_to_labels(prob[None], threshold)[0]
    return MaskRaster(labels.astype(np.uint8), max(2, k_out)), prob
