"""Synthetic shapes dataset and the on-disk split layout.

A split directory holds ``img_XXXX.ppm`` (P6), ``mask_XXXX.pgm`` (P5 class
indices), ``sal_XXXX.pgm`` (P5 saliency, 0-255) and ``labels.json`` mapping
each sample id to its multi-hot label vector. Real images use the same
layout; masks and saliency maps may be absent.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from pydantic import BaseModel, Field, root_validator

from . import netpbm
from .errors import FormatError
from .utils import ensure_directory

logger = logging.getLogger(__name__)

LABELS_FILE = "labels.json"
CLASS_NAMES = ("background", "disk", "square", "triangle")
SHAPE_COLORS = {
    1: (0.86, 0.22, 0.20),
    2: (0.22, 0.74, 0.28),
    3: (0.24, 0.36, 0.90),
}
MAX_PLACEMENT_ATTEMPTS = 60


class DataConfig(BaseModel):
    image_size: int = Field(64, ge=16)
    num_classes: int = Field(3, ge=2, le=len(SHAPE_COLORS))
    min_shapes: int = Field(1, ge=1)
    max_shapes: int = Field(3, ge=1)
    min_radius: int = Field(8, ge=3)
    max_radius: int = Field(14, ge=3)
    saliency_blur: int = Field(2, ge=0)
    saliency_noise: float = Field(0.1, ge=0)

    @root_validator(skip_on_failure=True)
    def _check_ranges(cls, values):
        if values["min_shapes"] > values["max_shapes"]:
            raise ValueError("min_shapes must not exceed max_shapes")
        if values["min_radius"] > values["max_radius"]:
            raise ValueError("min_radius must not exceed max_radius")
        if 2 * values["max_radius"] + 4 > values["image_size"]:
            raise ValueError("max_radius is too large for image_size")
        return values


@dataclass
class Sample:
    """One image with its image-level labels and optional pixel annotations."""

    name: str
    image: np.ndarray
    labels: np.ndarray
    gt_mask: Optional[np.ndarray] = None
    saliency: Optional[np.ndarray] = None

    @property
    def present_classes(self) -> List[int]:
        """Foreground class ids (1-based) named by the label vector."""
        return [int(i) + 1 for i in np.flatnonzero(self.labels)]

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def box_blur(values: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter over a square window with replicated edges."""
    if radius <= 0:
        return values.astype(np.float64)
    width = 2 * radius + 1
    values = np.ascontiguousarray(values, dtype=np.float64)
    return cv2.blur(values, (width, width), borderType=cv2.BORDER_REPLICATE)


def _shape_mask(kind: int, cy: float, cx: float, radius: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == 1:
        return dy * dy + dx * dx <= radius * radius
    if kind == 2:
        half = 0.7 * radius
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    # upward triangle inscribed in the bounding circle
    corners = [(-radius, 0.0), (0.5 * radius, -0.866 * radius), (0.5 * radius, 0.866 * radius)]
    inside = np.ones_like(dy, dtype=bool)
    for (ay, ax), (by, bx) in zip(corners, corners[1:] + corners[:1]):
        cross = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
        inside &= cross <= 0
    return inside


def _background(rng: np.random.Generator, size: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    base = 0.35 + 0.15 * rng.random()
    tint = rng.uniform(-0.04, 0.04, size=3)
    fy, fx = rng.uniform(0.1, 0.4, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    pattern = 0.08 * np.sin(fx * xx + phase) * np.cos(fy * yy)
    noise = rng.normal(0.0, 0.04, size=(3, size, size))
    return base + tint[:, None, None] + pattern[None] + noise


def _render(rng: np.random.Generator, config: DataConfig) -> Tuple[np.ndarray, np.ndarray]:
    size = config.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    image = _background(rng, size, yy, xx)
    mask = np.zeros((size, size), dtype=np.uint8)
    placed: List[Tuple[float, float, float]] = []
    count = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    for _ in range(count):
        kind = int(rng.integers(1, config.num_classes + 1))
        radius = float(rng.integers(config.min_radius, config.max_radius + 1))
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            cy, cx = rng.uniform(radius + 1, size - radius - 2, size=2)
            if all(np.hypot(cy - py, cx - px) > radius + pr + 2 for py, px, pr in placed):
                break
        else:
            continue
        placed.append((cy, cx, radius))
        region = _shape_mask(kind, cy, cx, radius, yy, xx)
        color = np.asarray(SHAPE_COLORS[kind]) + rng.uniform(-0.05, 0.05, size=3)
        shading = rng.normal(0.0, 0.03, size=(3, size, size))
        image = np.where(region[None], color[:, None, None] + shading, image)
        mask[region] = kind
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0, mask


def simulate_saliency(
    mask: np.ndarray, rng: np.random.Generator, blur: int, noise: float
) -> np.ndarray:
    """Blurred, noisy foreground mask standing in for an offline saliency detector."""
    saliency = box_blur((mask > 0).astype(np.float64), blur)
    if noise > 0:
        saliency = saliency + rng.normal(0.0, noise, size=mask.shape)
    return np.rint(np.clip(saliency, 0.0, 1.0) * 255.0) / 255.0


def synth_dataset(n: int, config: Optional[DataConfig] = None, seed: int = 0) -> List[Sample]:
    """``n`` deterministic samples with 1-3 non-overlapping coloured shapes each."""
    config = config or DataConfig()
    streams = np.random.SeedSequence(seed).spawn(n) if n > 0 else []
    samples: List[Sample] = []
    for index, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        image, mask = _render(rng, config)
        labels = np.zeros(config.num_classes, dtype=np.int64)
        for class_id in np.unique(mask):
            if class_id:
                labels[class_id - 1] = 1
        saliency = simulate_saliency(mask, rng, config.saliency_blur, config.saliency_noise)
        samples.append(Sample(f"{index:04d}", image, labels, mask, saliency))
    logger.debug("generated %d synthetic samples (seed %d)", len(samples), seed)
    return samples


# --- split directories -------------------------------------------------


def sample_paths(directory: Union[str, Path], name: str) -> Dict[str, Path]:
    directory = Path(directory)
    return {
        "image": directory / f"img_{name}.ppm",
        "mask": directory / f"mask_{name}.pgm",
        "saliency": directory / f"sal_{name}.pgm",
    }


def export_split(samples: Sequence[Sample], directory: Union[str, Path]) -> Path:
    directory = ensure_directory(directory)
    labels: Dict[str, List[int]] = {}
    for sample in samples:
        paths = sample_paths(directory, sample.name)
        netpbm.write_ppm(paths["image"], netpbm.chw_to_image(sample.image))
        if sample.gt_mask is not None:
            netpbm.write_pgm(paths["mask"], sample.gt_mask.astype(np.uint8))
        if sample.saliency is not None:
            netpbm.write_pgm(paths["saliency"], np.rint(sample.saliency * 255.0).astype(np.uint8))
        labels[sample.name] = [int(v) for v in sample.labels]
    (directory / LABELS_FILE).write_text(json.dumps(labels, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d samples to %s", len(samples), directory)
    return directory


def read_labels(directory: Union[str, Path]) -> Dict[str, List[int]]:
    path = Path(directory) / LABELS_FILE
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path} must map sample ids to label vectors")
    labels: Dict[str, List[int]] = {}
    for name, vector in raw.items():
        if not isinstance(vector, list) or any(v not in (0, 1) for v in vector):
            raise FormatError(f"{path}: labels of {name} must be a multi-hot list")
        labels[str(name)] = [int(v) for v in vector]
    return labels


def load_sample(directory: Union[str, Path], name: str, labels: Sequence[int]) -> Sample:
    """Read one sample; absent masks or saliency maps load as None."""
    paths = sample_paths(directory, name)
    image = netpbm.image_to_chw(netpbm.read_ppm(paths["image"]))
    mask = netpbm.read_pgm(paths["mask"]) if paths["mask"].exists() else None
    saliency = None
    if paths["saliency"].exists():
        saliency = netpbm.read_pgm(paths["saliency"]).astype(np.float64) / 255.0
    return Sample(name, image, np.asarray(labels, dtype=np.int64), mask, saliency)


def load_split(directory: Union[str, Path]) -> List[Sample]:
    labels = read_labels(directory)
    return [load_sample(directory, name, labels[name]) for name in sorted(labels)]
