"""Pseudo-label assembly and efficient potential object mining (EPOM).

Initial labels come from the refined attention maps, gated by a saliency
map. EPOM then marks background pixels whose class response is
suspiciously high as ignored (255) so they do not teach a segmentation
network the wrong class.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .errors import ShapeError, UsageError
from .refine import RefinedAttentionStack

logger = logging.getLogger(__name__)

BACKGROUND = 0
IGNORE_LABEL = 255
FROM_INITIAL = 0
FROM_EPOM = 1
TOP_QUARTILE = 0.75

MapStack = Union[RefinedAttentionStack, Mapping[int, np.ndarray]]


class EpomConfig(BaseModel):
    fg_thr: float = Field(0.3, ge=0, le=1)
    tau_sal: float = Field(0.5, ge=0, le=1)


@dataclass
class PseudoLabel:
    """H x W class ids with 255 for ignored pixels, plus which stage set each pixel."""

    grid: np.ndarray
    provenance: np.ndarray
    thresholds: Dict[int, float] = field(default_factory=dict)

    @property
    def ignored(self) -> int:
        return int((self.grid == IGNORE_LABEL).sum())

    def sidecar(self, present_classes: Sequence[int]) -> Dict[str, Any]:
        return {
            "present_classes": [int(c) for c in present_classes],
            "thresholds": {str(c): float(t) for c, t in sorted(self.thresholds.items())},
            "ignored_pixels": self.ignored,
        }


def _class_maps(maps: MapStack, present_classes: Sequence[int]) -> Tuple[List[int], Dict[int, np.ndarray]]:
    table = maps.maps if isinstance(maps, RefinedAttentionStack) else maps
    classes = sorted(int(c) for c in set(present_classes))
    missing = [c for c in classes if c not in table]
    if missing:
        raise UsageError(f"no attention map for present classes {missing}")
    if any(c == BACKGROUND or c == IGNORE_LABEL for c in classes):
        raise UsageError("present classes must be foreground ids")
    return classes, {c: np.asarray(table[c], dtype=np.float64) for c in classes}


def _argmax_label(classes: List[int], table: Dict[int, np.ndarray], shape: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
    if not classes:
        return np.zeros(shape, dtype=np.uint8), np.zeros(shape)
    stack = np.stack([table[c] for c in classes])
    if stack.shape[1:] != tuple(shape):
        raise ShapeError(f"attention maps {stack.shape[1:]} do not match label size {shape}")
    # np.argmax keeps the first maximum, i.e. the lowest class id on ties
    label = np.asarray(classes, dtype=np.uint8)[stack.argmax(axis=0)]
    peak = stack.max(axis=0)
    label[peak <= 0.0] = BACKGROUND
    return label, peak


def initial_pseudo_label(
    maps: MapStack,
    saliency: np.ndarray,
    present_classes: Sequence[int],
    config: EpomConfig = EpomConfig(),
) -> PseudoLabel:
    """Argmax over present classes where saliency reaches ``tau_sal``, background elsewhere."""
    saliency = np.asarray(saliency, dtype=np.float64)
    classes, table = _class_maps(maps, present_classes)
    label, _ = _argmax_label(classes, table, saliency.shape)
    label[saliency < config.tau_sal] = BACKGROUND
    return PseudoLabel(grid=label, provenance=np.full(label.shape, FROM_INITIAL, dtype=np.uint8))


def initial_label_without_saliency(
    maps: MapStack,
    present_classes: Sequence[int],
    shape: Tuple[int, int],
    config: EpomConfig = EpomConfig(),
) -> PseudoLabel:
    """Argmax over present classes; background where the best response is below ``fg_thr``."""
    classes, table = _class_maps(maps, present_classes)
    label, peak = _argmax_label(classes, table, shape)
    label[peak < config.fg_thr] = BACKGROUND
    return PseudoLabel(grid=label, provenance=np.full(label.shape, FROM_INITIAL, dtype=np.uint8))


def class_threshold(label: np.ndarray, attention: np.ndarray, class_id: int, fg_thr: float) -> float:
    """Median response over the class's labelled pixels, else the top-quartile response above ``fg_thr``.

    The top quartile is the nearest-rank value at index ceil(0.75 n) of the
    ascending responses (clamped to the last entry). With nothing above
    ``fg_thr`` the threshold is 1, which no response can exceed.
    """
    attention = np.asarray(attention, dtype=np.float64)
    owned = np.asarray(label) == class_id
    if owned.any():
        return float(np.median(attention[owned]))
    candidates = np.sort(attention[attention > fg_thr])
    if candidates.size == 0:
        return 1.0
    rank = min(math.ceil(TOP_QUARTILE * candidates.size), candidates.size - 1)
    return float(candidates[rank])


def epom_refine(
    label: PseudoLabel,
    maps: MapStack,
    present_classes: Sequence[int],
    config: EpomConfig = EpomConfig(),
) -> PseudoLabel:
    """Mark background pixels with a response above their class threshold as ignored."""
    classes, table = _class_maps(maps, present_classes)
    source = label.grid
    thresholds = {c: class_threshold(source, table[c], c, config.fg_thr) for c in classes}
    grid = source.copy()
    provenance = label.provenance.copy()
    background = source == BACKGROUND
    for class_id in classes:
        uncertain = background & (table[class_id] > thresholds[class_id])
        grid[uncertain] = IGNORE_LABEL
        provenance[uncertain] = FROM_EPOM
    logger.debug("EPOM ignored %d pixels (thresholds %s)", int((grid != source).sum()), thresholds)
    return PseudoLabel(grid=grid, provenance=provenance, thresholds=thresholds)


def epom_no_saliency(
    maps: MapStack,
    present_classes: Sequence[int],
    shape: Tuple[int, int],
    config: EpomConfig = EpomConfig(),
) -> PseudoLabel:
    """EPOM applied to labels built without a saliency map."""
    initial = initial_label_without_saliency(maps, present_classes, shape, config)
    return epom_refine(initial, maps, present_classes, config)
