"""Encoder-decoder segmentation networks built on :mod:`vineseg.autograd`."""

from .archs import (
    ModSegNet,
    ResUNet,
    SegModel,
    UNet,
    UNetPP,
    build_model,
    build_modsegnet,
    build_resunet,
    build_unet,
    build_unetpp,
    load_seg_model,
    save_seg_model,
)
from .config import ARCHS, SEARCH_GRID, ArchConfig, ConfigError, search_grid

__all__ = [
    "ARCHS",
    "SEARCH_GRID",
    "ArchConfig",
    "ConfigError",
    "search_grid",
    "SegModel",
    "UNet",
    "ResUNet",
    "UNetPP",
    "ModSegNet",
    "build_model",
    "build_unet",
    "build_resunet",
    "build_unetpp",
    "build_modsegnet",
    "save_seg_model",
    "load_seg_model",
]
