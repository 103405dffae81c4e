"""The four encoder-decoder segmentation networks.

Every model maps an N x C x H x W batch to N x K x H x W per-pixel
probabilities: a sigmoid head for K = 1, a softmax over channels otherwise.
Levels are numbered from 0 (full resolution) to depth - 1 (coarsest); the
dropout layers sit at the two coarsest levels.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..autograd import (
    Tensor,
    concat_channels,
    load_tensors,
    max_unpool2d,
    maxpool2d_2x2,
    no_grad,
    save_tensors,
    sigmoid,
    softmax_channels,
)
from .config import ArchConfig, ConfigError
from .layers import Context, Conv, DoubleConv, Dropout, ResBlock, Up

MODEL_FORMAT = "vineseg.segmodel/1"


class SegModel:
    """Base class: parameter registry, train/eval mode, head and input checks."""

    arch = ""

    def __init__(self, config: ArchConfig, dtype=np.float32):
        if config.arch != self.arch:
            raise ConfigError(f"{type(self).__name__} cannot be built from arch={config.arch!r}")
        self.config = config
        self._ctx = Context(config.seed, dtype)
        # static connectivity between named blocks, for structural checks
        self.edges: list[tuple[str, str]] = []
        self.drop = Dropout(self._ctx, config.dropout_rate)
        self._build(self._ctx)
        self.head = Conv(self._ctx, "head", config.base_filters, config.out_classes, k=1)

    # -- bookkeeping ------------------------------------------------------

    @property
    def params(self) -> dict[str, Tensor]:
        return self._ctx.params

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self._ctx.buffers

    @property
    def dtype(self) -> np.dtype:
        return self._ctx.dtype

    @property
    def training(self) -> bool:
        return self._ctx.training

    @property
    def mode(self) -> str:
        return "train" if self._ctx.training else "eval"

    def train(self) -> "SegModel":
        self._ctx.training = True
        return self

    def eval(self) -> "SegModel":
        self._ctx.training = False
        return self

    def reseed_dropout(self, seed) -> None:
        self._ctx.dropout_rng = np.random.default_rng(seed)

    def parameters(self) -> list[Tensor]:
        return list(self._ctx.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._ctx.params.values())

    def zero_grad(self) -> None:
        for p in self._ctx.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self._ctx.params.items()}
        out.update({k: v.copy() for k, v in self._ctx.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self._ctx.params) | set(self._ctx.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, v in state.items():
            target = self._ctx.params[k].data if k in self._ctx.params else self._ctx.buffers[k]
            if target.shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k!r}: {np.shape(v)} vs {target.shape}")
            # in place so layers keep their references
            target[...] = v

    # -- forward ----------------------------------------------------------

    def check_input(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if t.ndim != 4:
            raise ValueError(f"expected an N x C x H x W batch, got shape {t.shape}")
        _, c, h, w = t.shape
        if c != self.config.in_channels:
            raise ValueError(f"model expects {self.config.in_channels} input channels, got {c}")
        m = self.config.size_multiple
        if h % m or w % m:
            raise ValueError(f"input {h}x{w} is not divisible by {m} (depth {self.config.depth})")
        return t

    def forward(self, x) -> Tensor:
        t = self.check_input(x)
        logits = self.head(self._features(t))
        return sigmoid(logits) if self.config.out_classes == 1 else softmax_channels(logits)

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Probabilities without recording a graph (uses the current mode)."""
        with no_grad():
            return self.forward(x).data

    def _build(self, ctx: Context) -> None:
        raise NotImplementedError

    def _features(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _deep(self, level: int) -> bool:
        return level >= self.config.depth - 2

    def _in(self, level: int) -> int:
        return self.config.in_channels if level == 0 else self.config.filters(level - 1)


class UNet(SegModel):
    arch = "unet"
    block = DoubleConv

    def _build(self, ctx):
        cfg = self.config
        d = cfg.depth
        self.enc = [self.block(ctx, f"enc{i}", self._in(i), cfg.filters(i)) for i in range(d)]
        self.up: dict[int, Up] = {}
        self.dec: dict[int, object] = {}
        for i in range(d - 2, -1, -1):
            self.up[i] = Up(ctx, f"up{i}", cfg.upsample, cfg.filters(i + 1), cfg.filters(i))
            self.dec[i] = self.block(ctx, f"dec{i}", cfg.filters(i) + self.up[i].out_channels, cfg.filters(i))
        self.edges.append(("input", "enc0"))
        self.edges += [(f"enc{i - 1}", f"enc{i}") for i in range(1, d)]
        for i in range(d - 2, -1, -1):
            below = f"enc{d - 1}" if i == d - 2 else f"dec{i + 1}"
            self.edges += [(below, f"dec{i}"), (f"enc{i}", f"dec{i}")]
        self.edges.append(("dec0", "head"))

    def _features(self, x):
        d = self.config.depth
        skips = []
        h = x
        for i in range(d):
            if i > 0:
                h, _ = maxpool2d_2x2(h)
            h = self.enc[i](h)
            if self._deep(i):
                h = self.drop(h)
            skips.append(h)
        for i in range(d - 2, -1, -1):
            h = self.dec[i](concat_channels(skips[i], self.up[i](h)))
            if self._deep(i):
                h = self.drop(h)
        return h


class ResUNet(UNet):
    """U-Net with every double convolution replaced by a residual block."""

    arch = "resunet"
    block = ResBlock


class UNetPP(SegModel):
    """Nested U-Net: node (i, j) sees every earlier node on row i plus the upsampled node (i+1, j-1)."""

    arch = "unetpp"

    def _build(self, ctx):
        cfg = self.config
        d = cfg.depth
        self.nodes: dict[tuple[int, int], DoubleConv] = {}
        self.up: dict[tuple[int, int], Up] = {}
        for i in range(d):
            self.nodes[i, 0] = DoubleConv(ctx, f"x{i}_0", self._in(i), cfg.filters(i))
        for j in range(1, d):
            for i in range(d - j):
                up = Up(ctx, f"up{i}_{j}", cfg.upsample, cfg.filters(i + 1), cfg.filters(i))
                self.up[i, j] = up
                self.nodes[i, j] = DoubleConv(ctx, f"x{i}_{j}", j * cfg.filters(i) + up.out_channels, cfg.filters(i))
        self.edges.append(("input", "x0_0"))
        self.edges += [(f"x{i - 1}_0", f"x{i}_0") for i in range(1, d)]
        for j in range(1, d):
            for i in range(d - j):
                self.edges += [(f"x{i}_{k}", f"x{i}_{j}") for k in range(j)]
                self.edges.append((f"x{i + 1}_{j - 1}", f"x{i}_{j}"))
        self.edges.append((f"x0_{d - 1}", "head"))

    def _features(self, x):
        d = self.config.depth
        out: dict[tuple[int, int], Tensor] = {}
        h = x
        for i in range(d):
            if i > 0:
                h, _ = maxpool2d_2x2(h)
            h = self.nodes[i, 0](h)
            if self._deep(i):
                h = self.drop(h)
            out[i, 0] = h
        for j in range(1, d):
            for i in range(d - j):
                inputs = [out[i, k] for k in range(j)] + [self.up[i, j](out[i + 1, j - 1])]
                h = self.nodes[i, j](concat_channels(*inputs))
                if self._deep(i):
                    h = self.drop(h)
                out[i, j] = h
        return out[0, d - 1]


class ModSegNet(SegModel):
    """Encoder-decoder that upsamples with the encoder's own max-pooling indices.

    Encoder level i (i < depth - 1) is a double conv followed by an
    index-recording pool. A bottleneck double conv at the coarsest level
    widens to the top filter count and narrows back. Decoder level i
    unpools with level i's indices, concatenates level i's encoder features
    and applies a double conv that narrows to level i - 1's width.
    """

    arch = "modsegnet"

    def _build(self, ctx):
        cfg = self.config
        d = cfg.depth
        f = cfg.filters
        self.enc = [DoubleConv(ctx, f"enc{i}", self._in(i), f(i)) for i in range(d - 1)]
        self.bottleneck = DoubleConv(ctx, "bottleneck", f(d - 2), f(d - 2), c_mid=f(d - 1))
        self.dec = {i: DoubleConv(ctx, f"dec{i}", 2 * f(i), f(max(i - 1, 0)), c_mid=f(i)) for i in range(d - 2, -1, -1)}
        self.keep_trace = False
        self.trace: list[dict] = []
        self.edges.append(("input", "enc0"))
        self.edges += [(f"enc{i - 1}", f"enc{i}") for i in range(1, d - 1)]
        self.edges.append((f"enc{d - 2}", "bottleneck"))
        for i in range(d - 2, -1, -1):
            below = "bottleneck" if i == d - 2 else f"dec{i + 1}"
            self.edges += [(below, f"dec{i}"), (f"enc{i}", f"dec{i}")]
        self.edges.append(("dec0", "head"))

    def _features(self, x):
        d = self.config.depth
        skips, indices = [], []
        self.trace = []
        h = x
        for i in range(d - 1):
            h = self.enc[i](h)
            if self._deep(i):
                h = self.drop(h)
            skips.append(h)
            h, idx = maxpool2d_2x2(h)
            indices.append(idx)
        h = self.drop(self.bottleneck(h))
        for i in range(d - 2, -1, -1):
            u = max_unpool2d(h, indices[i], skips[i].shape[2:])
            if self.keep_trace:
                self.trace.append(
                    {"level": i, "encoder": skips[i].data, "indices": indices[i], "pooled": h.data, "unpooled": u.data}
                )
            h = self.dec[i](concat_channels(skips[i], u))
            if self._deep(i):
                h = self.drop(h)
        return h


_ARCH_CLASSES = {"unet": UNet, "resunet": ResUNet, "unetpp": UNetPP, "modsegnet": ModSegNet}


def build_model(cfg: ArchConfig, dtype=np.float32) -> SegModel:
    return _ARCH_CLASSES[cfg.arch](cfg, dtype)


def build_unet(cfg: ArchConfig, dtype=np.float32) -> UNet:
    return UNet(cfg, dtype)


def build_resunet(cfg: ArchConfig, dtype=np.float32) -> ResUNet:
    return ResUNet(cfg, dtype)


def build_unetpp(cfg: ArchConfig, dtype=np.float32) -> UNetPP:
    return UNetPP(cfg, dtype)


def build_modsegnet(cfg: ArchConfig, dtype=np.float32) -> ModSegNet:
    return ModSegNet(cfg, dtype)


def save_seg_model(model: SegModel, directory: str | Path) -> None:
    """Weights and batchnorm statistics as a float32 weight file, config as JSON."""
    directory = Path(directory)
    save_tensors(model.state_dict(), directory)
    meta = {"format": MODEL_FORMAT, "config": model.config.to_dict()}
    (directory / "model.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_seg_model(directory: str | Path) -> SegModel:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    if meta.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {meta.get('format')!r}")
    model = build_model(ArchConfig.from_dict(meta["config"]))
    model.load_state_dict(load_tensors(directory))
    return model.eval()
