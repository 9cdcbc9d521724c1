"""Attention map refinement: normalisation, interpolation, fusion and soft erase."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence, Union

import cv2
import numpy as np

from . import netpbm
from .errors import ShapeError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_SOFT_ERASE_RATE = 0.55
DEFAULT_SCALES = (0.75, 1.0, 1.25)


def normalize01(attention: np.ndarray) -> np.ndarray:
    """Min-max normalise to [0, 1]; a constant map becomes all zeros."""
    attention = np.asarray(attention, dtype=np.float64)
    if attention.size == 0:
        return attention.copy()
    low, high = attention.min(), attention.max()
    if high == low:
        return np.zeros_like(attention)
    return (attention - low) / (high - low)


def resize_bilinear(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2-D array with half-pixel centres (align_corners=False)."""
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {grid.shape}")
    if height <= 0 or width <= 0:
        raise ShapeError(f"target size {height}x{width} must be positive")
    return cv2.resize(grid, (width, height), interpolation=cv2.INTER_LINEAR)


def upsample_bilinear(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    return resize_bilinear(grid, height, width)


def soft_erase(attention: np.ndarray, rate: float = DEFAULT_SOFT_ERASE_RATE) -> np.ndarray:
    """Clip each map (last two axes) at ``rate`` times its own maximum."""
    if not 0.0 < rate <= 1.0:
        raise UsageError(f"soft erase rate must lie in (0, 1], got {rate}")
    attention = np.asarray(attention, dtype=np.float64)
    peak = attention.max(axis=(-2, -1), keepdims=True)
    return np.minimum(attention, peak * rate)


def multi_scale_fuse(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Average maps computed at several input scales and renormalise."""
    if not maps:
        raise UsageError("multi_scale_fuse needs at least one map")
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"maps must share one shape before fusion, got {sorted(shapes)}")
    return normalize01(np.mean(np.stack(maps), axis=0))


def rescale_image(image: np.ndarray, factor: float, multiple: int) -> np.ndarray:
    """Resize a C x H x W image by ``factor``, rounding sides to ``multiple``."""
    _, h, w = image.shape
    new_h = max(multiple, int(round(h * factor / multiple)) * multiple)
    new_w = max(multiple, int(round(w * factor / multiple)) * multiple)
    if (new_h, new_w) == (h, w):
        return image
    return np.stack([resize_bilinear(channel, new_h, new_w) for channel in image])


@dataclass
class RefinedAttentionStack:
    """Pixel-resolution maps in [0, 1] keyed by class id."""

    maps: Dict[int, np.ndarray]
    rate: float = DEFAULT_SOFT_ERASE_RATE
    shape: tuple = field(init=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.rate <= 1.0:
            raise UsageError(f"soft erase rate must lie in (0, 1], got {self.rate}")
        shapes = {m.shape for m in self.maps.values()}
        if len(shapes) > 1:
            raise ShapeError(f"refined maps disagree in shape: {sorted(shapes)}")
        self.shape = shapes.pop() if shapes else (0, 0)

    @property
    def classes(self):
        return sorted(self.maps)

    def stacked(self) -> np.ndarray:
        return np.stack([self.maps[c] for c in self.classes]) if self.maps else np.zeros((0,) + self.shape)


def refine_maps(
    initial: Mapping[int, Union[np.ndarray, Sequence[np.ndarray]]],
    height: int,
    width: int,
    rate: float = DEFAULT_SOFT_ERASE_RATE,
    erase: bool = True,
) -> RefinedAttentionStack:
    """Normalise, upsample and soft-erase patch-grid maps for each class.

    A list of grids for one class is treated as the outputs of several input
    scales and fused after upsampling.
    """
    refined: Dict[int, np.ndarray] = {}
    for class_id, grids in sorted(initial.items()):
        if isinstance(grids, np.ndarray):
            pixel = upsample_bilinear(normalize01(grids), height, width)
        else:
            pixel = multi_scale_fuse(
                [upsample_bilinear(normalize01(g), height, width) for g in grids]
            )
        refined[class_id] = soft_erase(pixel, rate) if erase else pixel
    return RefinedAttentionStack(maps=refined, rate=rate if erase else 1.0)


def heatmap_levels(attention: np.ndarray) -> np.ndarray:
    """8-bit grey levels for inspection: round(255 * A)."""
    return np.rint(np.clip(attention, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_pgm_bytes(attention: np.ndarray) -> bytes:
    """Encode a refined map as a binary PGM heatmap."""
    return netpbm.encode_pgm(heatmap_levels(attention))
