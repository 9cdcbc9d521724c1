"""Per-class attention maps from a trained classifier.

``dtd`` propagates relevance from the class logit back through every layer
(Deep Taylor Decomposition rules for transformers) and weights each block's
attention gradient by its relevance. ``rollout`` and ``cam`` are the
class-agnostic and class-activation baselines it is compared against.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .errors import ShapeError, UsageError
from .tensor import Tensor, no_grad
from .vit import AttentionTrace, BlockTrace, ViTModel

logger = logging.getLogger(__name__)

LRP_EPS = 1e-9
BlockSpec = Union[str, Sequence[int], None]


class RelevanceConfig(BaseModel):
    eps: float = Field(LRP_EPS, ge=0)
    positive_clamp: bool = True
    blocks: Union[str, List[int]] = "last"


@dataclass
class InitialAttentionMap:
    """Patch-grid response of one class (``class_index`` None for class-agnostic maps)."""

    class_index: Optional[int]
    grid: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape


def resolve_blocks(spec: BlockSpec, num_blocks: int) -> List[int]:
    """Turn ``last``, ``all``, ``"0,2"`` or a list into sorted block indices."""
    if spec is None or spec == "last":
        return [num_blocks - 1]
    if spec == "all":
        return list(range(num_blocks))
    if isinstance(spec, str):
        try:
            spec = [int(part) for part in spec.split(",") if part.strip()]
        except ValueError as exc:
            raise UsageError(f"cannot parse block list {spec!r}") from exc
    blocks = sorted(set(int(b) for b in spec))
    if not blocks:
        raise UsageError("block set must not be empty")
    bad = [b for b in blocks if not 0 <= b < num_blocks]
    if bad:
        raise UsageError(f"blocks {bad} outside 0..{num_blocks - 1}")
    return blocks


def class_score(logits: Tensor, class_index: int) -> Tensor:
    """S = sum(L ⊙ O) for the one-hot vector L of ``class_index``."""
    num_classes = logits.shape[-1]
    if not 0 <= class_index < num_classes:
        raise UsageError(f"class {class_index} outside 0..{num_classes - 1}")
    one_hot = np.zeros(logits.shape)
    one_hot[..., class_index] = 1.0
    return (logits * Tensor(one_hot)).sum()


# --- relevance rules ---------------------------------------------------


def safe_divide(numerator: np.ndarray, denominator: np.ndarray, eps: float = LRP_EPS) -> np.ndarray:
    """numerator / (denominator + eps·sign), zero wherever the denominator is zero."""
    stabilised = denominator + eps * np.where(denominator >= 0, 1.0, -1.0)
    out = np.zeros(np.broadcast(numerator, stabilised).shape)
    np.divide(numerator, stabilised, out=out, where=(denominator != 0))
    return out


def linear_relevance(x: np.ndarray, weight: np.ndarray, relevance: np.ndarray, eps: float = LRP_EPS) -> np.ndarray:
    """Alpha-one/beta-zero rule for ``y = x @ weight`` (bias ignored)."""
    w_pos, w_neg = np.maximum(weight, 0.0), np.minimum(weight, 0.0)
    x_pos, x_neg = np.maximum(x, 0.0), np.minimum(x, 0.0)
    z = x_pos @ w_pos + x_neg @ w_neg
    s = safe_divide(relevance, z, eps)
    return x_pos * (s @ w_pos.T) + x_neg * (s @ w_neg.T)


def add_relevance(
    a: np.ndarray, b: np.ndarray, relevance: np.ndarray, eps: float = LRP_EPS
) -> Tuple[np.ndarray, np.ndarray]:
    """Split relevance of ``a + b`` between the branches by their contributions.

    Each branch is rescaled so the branch totals keep the ratio of their
    absolute contributions and together sum to the incoming total.
    """
    s = safe_divide(relevance, a + b, eps)
    r_a, r_b = a * s, b * s
    axes = tuple(range(1, relevance.ndim))
    sum_a = r_a.sum(axis=axes, keepdims=True)
    sum_b = r_b.sum(axis=axes, keepdims=True)
    total = relevance.sum(axis=axes, keepdims=True)
    norm = np.abs(sum_a) + np.abs(sum_b)
    r_a = r_a * safe_divide(safe_divide(np.abs(sum_a), norm, eps) * total, sum_a, eps)
    r_b = r_b * safe_divide(safe_divide(np.abs(sum_b), norm, eps) * total, sum_b, eps)
    return r_a, r_b


def matmul_relevance(
    a: np.ndarray, b: np.ndarray, relevance: np.ndarray, eps: float = LRP_EPS
) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear rule for ``a @ b``: each operand receives half the relevance."""
    s = safe_divide(relevance, a @ b, eps)
    r_a = a * (s @ np.swapaxes(b, -1, -2))
    r_b = b * (np.swapaxes(a, -1, -2) @ s)
    return r_a / 2.0, r_b / 2.0


def _block_relevance(model: ViTModel, b: int, record: BlockTrace, relevance: np.ndarray, eps: float) -> np.ndarray:
    cfg = model.config
    params = model.params
    pre = f"blocks.{b}."
    n, t, d = record.inputs.shape

    r_residual, r_mlp = add_relevance(record.residual.data, record.mlp_out.data, relevance, eps)
    r_mlp = linear_relevance(record.act.data, params[pre + "mlp.fc2.weight"].data, r_mlp, eps)
    # GELU and LayerNorm pass relevance through unchanged.
    r_mlp = linear_relevance(record.norm2.data, params[pre + "mlp.fc1.weight"].data, r_mlp, eps)
    r_residual = r_residual + r_mlp

    r_x, r_attn = add_relevance(record.inputs.data, record.attn_out.data, r_residual, eps)
    r_attn = linear_relevance(record.context.data, params[pre + "attn.proj.weight"].data, r_attn, eps)
    r_attn = r_attn.reshape(n, t, cfg.num_heads, cfg.head_dim).transpose(0, 2, 1, 3)
    r_matrix, r_v = matmul_relevance(record.attention.data, record.v.data, r_attn, eps)
    record.relevance = r_matrix
    # softmax passes relevance through; scores are q @ k^T
    r_q, r_kt = matmul_relevance(record.q.data, np.swapaxes(record.k.data, -1, -2), r_matrix, eps)
    r_k = np.swapaxes(r_kt, -1, -2)
    r_qkv = np.stack([r_q, r_k, r_v]).transpose(1, 3, 0, 2, 4).reshape(n, t, 3 * d)
    r_norm1 = linear_relevance(record.norm1.data, params[pre + "attn.qkv.weight"].data, r_qkv, eps)
    return r_x + r_norm1


def relevance_propagate(
    model: ViTModel,
    trace: Optional[AttentionTrace],
    class_index: int,
    config: Optional[RelevanceConfig] = None,
) -> AttentionTrace:
    """Fill ``R^b`` on every block of ``trace`` starting from a one-hot at the logits."""
    config = config or RelevanceConfig()
    if trace is None or not trace.blocks:
        raise UsageError("relevance propagation needs a trace recorded with record_attention=True")
    num_classes = model.config.num_classes
    if not 0 <= class_index < num_classes:
        raise UsageError(f"class {class_index} outside 0..{num_classes - 1}")
    eps = config.eps

    relevance = np.zeros(trace.logits.shape)
    relevance[..., class_index] = 1.0
    r_cls = linear_relevance(trace.cls_feature.data, model.params["head.weight"].data, relevance, eps)
    tokens = np.zeros(trace.features.shape)
    tokens[:, 0, :] = r_cls
    # final LayerNorm passes relevance through
    for b in reversed(range(len(trace.blocks))):
        tokens = _block_relevance(model, b, trace.blocks[b], tokens, eps)
    trace.input_relevance = tokens
    return trace


# --- explainers --------------------------------------------------------


def _as_batch(image: Union[np.ndarray, Tensor]) -> np.ndarray:
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[0] != 1:
        raise ShapeError(f"explainers take one C x H x W image, got {data.shape}")
    return data


def _cls_patch_row(joint: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    return joint[0, 1:].reshape(grid)


def dtd_attention(
    model: ViTModel,
    image: Union[np.ndarray, Tensor],
    class_index: int,
    config: Optional[RelevanceConfig] = None,
) -> InitialAttentionMap:
    """Relevance-weighted attention gradients of the chosen blocks, read at the CLS row."""
    config = config or RelevanceConfig()
    blocks = resolve_blocks(config.blocks, model.config.num_blocks)
    batch = Tensor(_as_batch(image), requires_grad=True)
    logits, trace = model.forward(batch, record_attention=True, track_params=False)
    class_score(logits, class_index).backward()
    relevance_propagate(model, trace, class_index, config)

    size = trace.blocks[0].attention.shape[-1]
    joint: Optional[np.ndarray] = None
    for b in blocks:
        record = trace.blocks[b]
        grad = record.attention_grad
        if grad is None:
            grad = np.zeros(record.attention.shape)
        weighted = grad[0] * record.relevance[0]
        if config.positive_clamp:
            weighted = np.maximum(weighted, 0.0)
        layer = np.eye(size) + weighted.mean(axis=0)
        joint = layer if joint is None else layer @ joint
    return InitialAttentionMap(class_index=class_index, grid=_cls_patch_row(joint, trace.grid))


def rollout_attention(
    model: ViTModel,
    image: Union[np.ndarray, Tensor],
    class_index: Optional[int] = None,
    config: Optional[RelevanceConfig] = None,
) -> InitialAttentionMap:
    """Class-agnostic product of row-normalised (I + mean-head attention) matrices."""
    with no_grad():
        _, trace = model.forward(_as_batch(image), record_attention=True, track_params=False)
    joint: Optional[np.ndarray] = None
    for record in trace.blocks:
        heads = record.attention.data[0].mean(axis=0)
        layer = np.eye(heads.shape[-1]) + heads
        layer = layer / layer.sum(axis=-1, keepdims=True)
        joint = layer if joint is None else layer @ joint
    return InitialAttentionMap(class_index=class_index, grid=_cls_patch_row(joint, trace.grid))


def cam_attention(
    model: ViTModel,
    image: Union[np.ndarray, Tensor],
    class_index: int,
    config: Optional[RelevanceConfig] = None,
) -> InitialAttentionMap:
    """Head weights of the class dotted with every patch token's final feature."""
    num_classes = model.config.num_classes
    if not 0 <= class_index < num_classes:
        raise UsageError(f"class {class_index} outside 0..{num_classes - 1}")
    with no_grad():
        _, trace = model.forward(_as_batch(image), record_attention=True, track_params=False)
    weights = model.params["head.weight"].data[:, class_index]
    scores = trace.patch_features()[0] @ weights
    return InitialAttentionMap(class_index=class_index, grid=scores.reshape(trace.grid))


Explainer = Callable[..., InitialAttentionMap]

EXPLAINERS: Dict[str, Explainer] = {
    "dtd": dtd_attention,
    "rollout": rollout_attention,
    "cam": cam_attention,
}

# explainers whose map does not depend on the class
CLASS_AGNOSTIC = frozenset({"rollout"})


def get_explainer(name: str) -> Explainer:
    try:
        return EXPLAINERS[name]
    except KeyError:
        raise UsageError(
            f"unknown explainer {name!r}; choose one of {', '.join(sorted(EXPLAINERS))}"
        ) from None
