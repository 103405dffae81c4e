"""Parameter bookkeeping and the building blocks shared by the architectures."""

from __future__ import annotations

import numpy as np

from ..autograd import (
    Tensor,
    batchnorm2d,
    conv2d,
    conv_transpose2x2,
    dropout,
    relu,
    residual_add,
    upsample_nearest_2x,
)


class Context:
    """Mutable per-model state seen by every layer: parameters, buffers, mode, dropout rng."""

    def __init__(self, seed: int, dtype=np.float32):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True
        self.dtype = np.dtype(dtype)
        self.init_rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng([seed, 1])

    def param(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        arr = np.array(data, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def he_normal(self, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        return self.init_rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv:
    def __init__(self, ctx: Context, name: str, c_in: int, c_out: int, k: int = 3):
        self.weight = ctx.param(f"{name}.weight", ctx.he_normal((c_out, c_in, k, k), c_in * k * k))
        self.bias = ctx.param(f"{name}.bias", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class BatchNorm:
    def __init__(self, ctx: Context, name: str, channels: int):
        self.ctx = ctx
        self.gamma = ctx.param(f"{name}.gamma", np.ones(channels))
        self.beta = ctx.param(f"{name}.beta", np.zeros(channels))
        self.running_mean = ctx.buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = ctx.buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, self.ctx.training)


class DoubleConv:
    """conv3x3 -> relu -> conv3x3 -> relu."""

    def __init__(self, ctx: Context, name: str, c_in: int, c_out: int, c_mid: int | None = None):
        c_mid = c_out if c_mid is None else c_mid
        self.conv1 = Conv(ctx, f"{name}.conv1", c_in, c_mid)
        self.conv2 = Conv(ctx, f"{name}.conv2", c_mid, c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.conv2(relu(self.conv1(x))))


class ResBlock:
    """relu(bn(conv(relu(bn(conv(x))))) + shortcut(x)); shortcut is a 1x1 conv when widths differ."""

    def __init__(self, ctx: Context, name: str, c_in: int, c_out: int):
        self.conv1 = Conv(ctx, f"{name}.conv1", c_in, c_out)
        self.bn1 = BatchNorm(ctx, f"{name}.bn1", c_out)
        self.conv2 = Conv(ctx, f"{name}.conv2", c_out, c_out)
        self.bn2 = BatchNorm(ctx, f"{name}.bn2", c_out)
        self.proj = Conv(ctx, f"{name}.proj", c_in, c_out, k=1) if c_in != c_out else None

    def __call__(self, x: Tensor) -> Tensor:
        branch = self.bn2(self.conv2(relu(self.bn1(self.conv1(x)))))
        shortcut = self.proj(x) if self.proj is not None else x
        return relu(residual_add(branch, shortcut))


class Up:
    """2x spatial upsampling; ``transposed`` also maps c_in to c_out channels."""

    def __init__(self, ctx: Context, name: str, mode: str, c_in: int, c_out: int):
        self.mode = mode
        if mode == "transposed":
            self.weight = ctx.param(f"{name}.weight", ctx.he_normal((c_in, c_out, 2, 2), c_in))
            self.bias = ctx.param(f"{name}.bias", np.zeros(c_out))
            self.out_channels = c_out
        else:
            self.out_channels = c_in

    def __call__(self, x: Tensor) -> Tensor:
        if self.mode == "transposed":
            return conv_transpose2x2(x, self.weight, self.bias)
        return upsample_nearest_2x(x)


class Dropout:
    def __init__(self, ctx: Context, rate: float):
        self.ctx = ctx
        self.rate = rate

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.ctx.training, self.ctx.dropout_rng)
