"""Architecture configuration and the hyperparameter grid it is drawn from."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

ARCHS = ("unet", "resunet", "unetpp", "modsegnet")
UPSAMPLE_MODES = ("nearest", "transposed")

# Grid explored per architecture: depth is the number of resolution levels
# (depth - 1 poolings), so 96 px patches allow up to depth 6.
SEARCH_GRID = {
    "unet": {"depth": (4, 5, 6), "base_filters": (16, 32), "dropout_rate": (0.0, 0.3)},
    "resunet": {"depth": (4, 5), "base_filters": (16, 32), "dropout_rate": (0.0, 0.3)},
    "unetpp": {"depth": (4,), "base_filters": (16, 32), "dropout_rate": (0.0, 0.3)},
    "modsegnet": {"depth": (4,), "base_filters": (32, 64), "dropout_rate": (0.5,)},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    arch: str = "unet"
    depth: int = 4
    base_filters: int = 16
    dropout_rate: float = 0.0
    in_channels: int = 13
    out_classes: int = 1
    upsample: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2 resolution levels, got {self.depth}")
        if self.base_filters < 1 or self.in_channels < 1:
            raise ConfigError("base_filters and in_channels must be positive")
        if self.out_classes < 1:
            raise ConfigError("out_classes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.upsample not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample must be one of {UPSAMPLE_MODES}, got {self.upsample!r}")

    def filters(self, level: int) -> int:
        return self.base_filters * 2**level

    @property
    def filter_ladder(self) -> list[int]:
        return [self.filters(i) for i in range(self.depth)]

    @property
    def size_multiple(self) -> int:
        """Input height and width must be divisible by this."""
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ArchConfig keys {sorted(unknown)}")
        return cls(**d)


def search_grid(arch: str, **overrides) -> list[ArchConfig]:
    """Every (depth, base_filters, dropout_rate) combination listed for ``arch``."""
    g = SEARCH_GRID[arch]
    return [
        ArchConfig(arch=arch, depth=d, base_filters=f, dropout_rate=r, **overrides)
        for d in g["depth"]
        for f in g["base_filters"]
        for r in g["dropout_rate"]
    ]
