"""Binary netpbm images: P6 (RGB) for inputs, P5 (grey) for masks, saliency and heatmaps."""
from __future__ import annotations

from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .errors import FormatError

PathLike = Union[str, Path]


def _header_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("netpbm header ended early")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode(data: bytes) -> np.ndarray:
    """Decode P5 to H x W or P6 to H x W x 3 uint8 arrays."""
    tokens, offset = _header_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"malformed netpbm header {tokens!r}") from exc
    if width <= 0 or height <= 0 or not 0 < maxval <= 255:
        raise FormatError(f"unsupported netpbm geometry {width}x{height} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise FormatError(f"netpbm raster has {len(raster)} bytes, expected {expected}")
    pixels = np.frombuffer(raster, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).copy()


def encode_pgm(grey: np.ndarray) -> bytes:
    grey = np.asarray(grey)
    if grey.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got shape {grey.shape}")
    h, w = grey.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + grey.astype(np.uint8).tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"PPM needs an H x W x 3 array, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes()


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def read_pgm(path: PathLike) -> np.ndarray:
    image = decode(_read(path))
    if image.ndim != 2:
        raise FormatError(f"{path} is not a greyscale (P5) image")
    return image


def read_ppm(path: PathLike) -> np.ndarray:
    image = decode(_read(path))
    if image.ndim != 3:
        raise FormatError(f"{path} is not an RGB (P6) image")
    return image


def write_pgm(path: PathLike, grey: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(grey))


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


def image_to_chw(rgb: np.ndarray) -> np.ndarray:
    """uint8 H x W x 3 to float C x H x W in [0, 1]."""
    return rgb.astype(np.float64).transpose(2, 0, 1) / 255.0


def chw_to_image(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
