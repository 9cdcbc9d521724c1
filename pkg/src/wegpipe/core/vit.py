"""A small DeiT-style vision transformer built on the wegpipe tensor engine."""
from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, root_validator

from .errors import ConfigError, FormatError, ShapeError
from .refine import resize_bilinear
from .tensor import (
    Tensor,
    broadcast_to,
    concatenate,
    decode_tnsr,
    encode_tnsr,
    gelu,
    layer_norm,
    no_grad,
    softmax,
)

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT = "wegpipe-weights"
MANIFEST_SUFFIX = ".manifest.json"
BLOB_SUFFIX = ".tnsr"
INIT_STD = 0.02


class ViTConfig(BaseModel):
    image_size: int = Field(64, gt=0)
    patch_size: int = Field(8, gt=0)
    in_chans: int = Field(3, gt=0)
    embed_dim: int = Field(64, gt=0)
    num_heads: int = Field(4, gt=0)
    num_blocks: int = Field(6, gt=0)
    mlp_ratio: float = Field(4.0, gt=0)
    num_classes: int = Field(3, gt=0)

    @root_validator(skip_on_failure=True)
    def _check_divisibility(cls, values):
        if values["image_size"] % values["patch_size"]:
            raise ValueError(
                f"patch_size {values['patch_size']} must divide image_size {values['image_size']}"
            )
        if values["embed_dim"] % values["num_heads"]:
            raise ValueError(
                f"num_heads {values['num_heads']} must divide embed_dim {values['embed_dim']}"
            )
        return values

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


def coerce_vit_config(config: Union[ViTConfig, Mapping]) -> ViTConfig:
    if isinstance(config, ViTConfig):
        return config
    try:
        return ViTConfig.parse_obj(dict(config))
    except ValidationError as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc


def parameter_shapes(config: ViTConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every parameter name with its shape, in storage order."""
    d, p, hidden = config.embed_dim, config.patch_size, config.mlp_hidden
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["patch_embed.weight"] = (config.in_chans * p * p, d)
    shapes["patch_embed.bias"] = (d,)
    shapes["cls_token"] = (1, 1, d)
    shapes["pos_embed"] = (1, config.seq_len, d)
    for b in range(config.num_blocks):
        prefix = f"blocks.{b}."
        shapes[prefix + "norm1.weight"] = (d,)
        shapes[prefix + "norm1.bias"] = (d,)
        shapes[prefix + "attn.qkv.weight"] = (d, 3 * d)
        shapes[prefix + "attn.qkv.bias"] = (3 * d,)
        shapes[prefix + "attn.proj.weight"] = (d, d)
        shapes[prefix + "attn.proj.bias"] = (d,)
        shapes[prefix + "norm2.weight"] = (d,)
        shapes[prefix + "norm2.bias"] = (d,)
        shapes[prefix + "mlp.fc1.weight"] = (d, hidden)
        shapes[prefix + "mlp.fc1.bias"] = (hidden,)
        shapes[prefix + "mlp.fc2.weight"] = (hidden, d)
        shapes[prefix + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return values * std


@dataclass
class BlockTrace:
    """Activations of one transformer block kept for explanation."""

    inputs: Tensor
    norm1: Tensor
    q: Tensor
    k: Tensor
    v: Tensor
    attention: Tensor
    context: Tensor
    attn_out: Tensor
    residual: Tensor
    norm2: Tensor
    fc1: Tensor
    act: Tensor
    mlp_out: Tensor
    outputs: Tensor
    relevance: Optional[np.ndarray] = None

    @property
    def attention_grad(self) -> Optional[np.ndarray]:
        return self.attention.grad


@dataclass
class AttentionTrace:
    """Per-block attention records of one forward pass."""

    blocks: List[BlockTrace]
    tokens: Tensor
    features: Tensor
    normed: Tensor
    cls_feature: Tensor
    logits: Tensor
    grid: Tuple[int, int]
    input_relevance: Optional[np.ndarray] = field(default=None)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def patch_features(self) -> np.ndarray:
        """Final (normalised) features of the patch tokens, shape N x s x D."""
        return self.normed.data[:, 1:, :]


def patchify(image: Union[Tensor, np.ndarray], patch_size: int) -> Tensor:
    """Split C x H x W (or N x C x H x W) images into flattened raster-order patches."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    single = image.ndim == 3
    if single:
        image = image.reshape(1, *image.shape)
    if image.ndim != 4:
        raise ShapeError(f"expected a C x H x W or N x C x H x W image, got {image.shape}")
    n, c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} is not divisible into {patch_size}x{patch_size} patches")
    gh, gw = h // patch_size, w // patch_size
    patches = (
        image.reshape(n, c, gh, patch_size, gw, patch_size)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(n, gh * gw, c * patch_size * patch_size)
    )
    if single:
        return patches.reshape(gh * gw, c * patch_size * patch_size)
    return patches


def unpatchify(patches: np.ndarray, channels: int, height: int, width: int, patch_size: int) -> np.ndarray:
    gh, gw = height // patch_size, width // patch_size
    grid = patches.reshape(gh, gw, channels, patch_size, patch_size)
    return grid.transpose(2, 0, 3, 1, 4).reshape(channels, height, width)


class ViTModel:
    """Parameters of the classifier plus the forward pass."""

    def __init__(self, config: ViTConfig, params: Mapping[str, np.ndarray]) -> None:
        self.config = config
        expected = parameter_shapes(config)
        missing = [name for name in expected if name not in params]
        if missing:
            raise ConfigError(f"missing parameters: {', '.join(missing)}")
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in expected.items():
            value = np.asarray(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ShapeError(f"parameter {name} has shape {value.shape}, expected {shape}")
            self.params[name] = Tensor(value.copy(), requires_grad=True)

    def copy(self) -> "ViTModel":
        return ViTModel(self.config, self.state_dict())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _pos_embed(self, params: Mapping[str, Tensor], grid: Tuple[int, int]) -> Tensor:
        pos = params["pos_embed"]
        size = self.config.grid_size
        if grid == (size, size):
            return pos
        # Inference at another resolution: resample the patch part of the embedding.
        d = self.config.embed_dim
        patch_part = pos.data[0, 1:, :].reshape(size, size, d)
        resized = np.stack(
            [resize_bilinear(patch_part[:, :, i], grid[0], grid[1]) for i in range(d)], axis=-1
        )
        merged = np.concatenate([pos.data[:, :1, :], resized.reshape(1, grid[0] * grid[1], d)], axis=1)
        return Tensor(merged)

    def forward(
        self,
        images: Union[Tensor, np.ndarray],
        record_attention: bool = False,
        track_params: bool = True,
    ) -> Tuple[Tensor, Optional[AttentionTrace]]:
        """Run the classifier; logits have shape N x c.

        With ``track_params=False`` the parameters enter the graph as
        constants, so concurrent explanations on a shared model never write
        parameter gradients.
        """
        cfg = self.config
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim == 3:
            images = images.reshape(1, *images.shape)
        if images.ndim != 4 or images.shape[1] != cfg.in_chans:
            raise ShapeError(
                f"expected N x {cfg.in_chans} x H x W images, got {images.shape}"
            )
        n, _, h, w = images.shape
        p = cfg.patch_size
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} is not divisible into {p}x{p} patches")
        grid = (h // p, w // p)
        params = self.params if track_params else {k: v.detach() for k, v in self.params.items()}

        tokens = patchify(images, p) @ params["patch_embed.weight"] + params["patch_embed.bias"]
        cls = broadcast_to(params["cls_token"], (n, 1, cfg.embed_dim))
        x = concatenate([cls, tokens], axis=1) + self._pos_embed(params, grid)
        embedded = x

        records: List[BlockTrace] = []
        for b in range(cfg.num_blocks):
            x, record = self._block(params, b, x, record_attention)
            if record_attention:
                records.append(record)

        features = x
        normed = layer_norm(x, params["norm.weight"], params["norm.bias"])
        cls_feature = normed[:, 0, :]
        logits = cls_feature @ params["head.weight"] + params["head.bias"]
        if not record_attention:
            return logits, None
        trace = AttentionTrace(
            blocks=records,
            tokens=embedded,
            features=features,
            normed=normed,
            cls_feature=cls_feature,
            logits=logits,
            grid=grid,
        )
        return logits, trace

    def _block(
        self, params: Mapping[str, Tensor], b: int, x: Tensor, record: bool = False
    ) -> Tuple[Tensor, BlockTrace]:
        cfg = self.config
        pre = f"blocks.{b}."
        n, t, d = x.shape
        heads, head_dim = cfg.num_heads, cfg.head_dim

        h1 = layer_norm(x, params[pre + "norm1.weight"], params[pre + "norm1.bias"])
        qkv = h1 @ params[pre + "attn.qkv.weight"] + params[pre + "attn.qkv.bias"]
        qkv = qkv.reshape(n, t, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
        attention = softmax(scores, axis=-1)
        if record:
            attention.retain_grad()
        context = attention @ v
        merged = context.transpose(0, 2, 1, 3).reshape(n, t, d)
        attn_out = merged @ params[pre + "attn.proj.weight"] + params[pre + "attn.proj.bias"]
        residual = x + attn_out

        h2 = layer_norm(residual, params[pre + "norm2.weight"], params[pre + "norm2.bias"])
        fc1 = h2 @ params[pre + "mlp.fc1.weight"] + params[pre + "mlp.fc1.bias"]
        act = gelu(fc1)
        mlp_out = act @ params[pre + "mlp.fc2.weight"] + params[pre + "mlp.fc2.bias"]
        out = residual + mlp_out
        trace = BlockTrace(
            inputs=x,
            norm1=h1,
            q=q,
            k=k,
            v=v,
            attention=attention,
            context=merged,
            attn_out=attn_out,
            residual=residual,
            norm2=h2,
            fc1=fc1,
            act=act,
            mlp_out=mlp_out,
            outputs=out,
        )
        return out, trace

    def predict_proba(self, images: Union[Tensor, np.ndarray]) -> np.ndarray:
        with no_grad():
            logits, _ = self.forward(images, track_params=False)
        return 1.0 / (1.0 + np.exp(-logits.data))


def build_model(config: Union[ViTConfig, Mapping], seed: int) -> ViTModel:
    """Deterministically initialise a model from ``seed``."""
    config = coerce_vit_config(config)
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name in ("cls_token", "pos_embed"):
            params[name] = rng.standard_normal(shape) * INIT_STD
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        elif name.startswith("norm") or ".norm" in name:
            params[name] = np.ones(shape)
        else:
            params[name] = _trunc_normal(rng, shape, INIT_STD)
    logger.debug("built model with %d parameter tensors (seed %d)", len(params), seed)
    return ViTModel(config, params)


def forward(
    model: ViTModel, image: Union[Tensor, np.ndarray], record_attention: bool = False
) -> Tuple[Tensor, Optional[AttentionTrace]]:
    return model.forward(image, record_attention=record_attention)


# --- weight files ------------------------------------------------------


class ParameterEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(..., ge=0)
    count: int = Field(..., ge=0)


class WeightManifest(BaseModel):
    format: str = WEIGHTS_FORMAT
    version: int = 1
    config: ViTConfig
    blob: str
    parameters: List[ParameterEntry]


def _weight_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    raw = str(path)
    for suffix in (MANIFEST_SUFFIX, BLOB_SUFFIX):
        if raw.endswith(suffix):
            raw = raw[: -len(suffix)]
    return Path(raw + MANIFEST_SUFFIX), Path(raw + BLOB_SUFFIX)


def save_weights(model: ViTModel, path: Union[str, Path]) -> Path:
    """Write ``<name>.manifest.json`` and ``<name>.tnsr``; returns the manifest path."""
    manifest_path, blob_path = _weight_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, tensor in model.params.items():
        flat = tensor.data.reshape(-1)
        entries.append(ParameterEntry(name=name, shape=list(tensor.shape), offset=offset, count=flat.size))
        chunks.append(flat)
        offset += flat.size
    manifest = WeightManifest(config=model.config, blob=blob_path.name, parameters=entries)
    blob_path.write_bytes(encode_tnsr(np.concatenate(chunks) if chunks else np.zeros(0)))
    manifest_path.write_text(json.dumps(manifest.dict(), indent=2, sort_keys=True) + "\n")
    logger.info("saved weights to %s", manifest_path)
    return manifest_path


def load_weights(path: Union[str, Path]) -> ViTModel:
    manifest_path, _ = _weight_paths(path)
    try:
        manifest = WeightManifest.parse_raw(manifest_path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read weight manifest {manifest_path}: {exc}") from exc
    except (ValidationError, ValueError) as exc:
        raise FormatError(f"corrupt weight manifest {manifest_path}: {exc}") from exc
    if manifest.format != WEIGHTS_FORMAT:
        raise FormatError(f"{manifest_path} is not a {WEIGHTS_FORMAT} manifest")

    blob_path = manifest_path.parent / manifest.blob
    try:
        flat = decode_tnsr(blob_path.read_bytes())
    except OSError as exc:
        raise FormatError(f"cannot read weight blob {blob_path}: {exc}") from exc
    if flat.ndim != 1:
        raise FormatError(f"weight blob {blob_path} must be rank 1, got rank {flat.ndim}")

    expected = parameter_shapes(manifest.config)
    declared = {entry.name: entry for entry in manifest.parameters}
    params: Dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        entry = declared.get(name)
        if entry is None:
            raise FormatError(f"weight manifest lacks parameter {name}")
        if tuple(entry.shape) != shape:
            raise FormatError(
                f"parameter {name} declared with shape {tuple(entry.shape)}, config requires {shape}"
            )
        if entry.count != int(np.prod(shape)) or entry.offset + entry.count > flat.size:
            raise FormatError(f"parameter {name} does not fit inside the weight blob")
        params[name] = flat[entry.offset : entry.offset + entry.count].reshape(shape)
    return ViTModel(manifest.config, params)
