"""Multi-label training of the classifier: BCE loss, AdamW and the epoch loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from .dataset import Sample
from .errors import NumericError, ShapeError, TrainingError, UsageError
from .tensor import Tensor
from .vit import ViTModel

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    epochs: int = Field(15, gt=0)
    batch_size: int = Field(16, gt=0)
    lr: float = Field(1e-3, ge=0)
    weight_decay: float = Field(0.05, ge=0)
    seed: int = Field(0, ge=0)


class AdamWHyper(BaseModel):
    lr: float = Field(1e-3, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.0, ge=0)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class EpochStats(BaseModel):
    epoch: int
    loss: float
    accuracy: float


def bce_multilabel_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean sigmoid cross-entropy over classes (and batch), in log-sum-exp form."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        if targets.size != logits.size:
            raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
        targets = targets.reshape(logits.shape)
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise UsageError("multi-label targets must be 0 or 1")
    x = logits.data
    per_class = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    count = x.size

    def backward(g: np.ndarray):
        sigmoid = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * (sigmoid - targets) / count,)

    return Tensor.from_op(np.array(per_class.mean()), (logits,), backward, "bce")


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    hyper: AdamWHyper,
) -> Tuple[Mapping[str, np.ndarray], AdamState]:
    """One AdamW update, in place; weight decay skips 1-D tensors (biases, norm scales)."""
    state.step += 1
    t = state.step
    correction1 = 1.0 - hyper.beta1 ** t
    correction2 = 1.0 - hyper.beta2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        if grad.shape != param.shape:
            raise ShapeError(f"gradient of {name} has shape {grad.shape}, expected {param.shape}")
        m = state.m.get(name, np.zeros_like(param))
        v = state.v.get(name, np.zeros_like(param))
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * grad
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = (m / correction1) / (np.sqrt(v / correction2) + hyper.eps)
        if hyper.weight_decay and param.ndim > 1:
            update = update + hyper.weight_decay * param
        param -= hyper.lr * update
    return params, state


def macro_accuracy(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Per-class accuracy averaged over classes."""
    return float(np.mean((predictions == targets).mean(axis=0)))


def train(
    model: ViTModel,
    dataset: Sequence[Sample],
    config: Optional[TrainConfig] = None,
    progress: bool = False,
) -> Tuple[ViTModel, List[EpochStats]]:
    """Train a copy of ``model``; the input model is left untouched."""
    config = config or TrainConfig()
    if not dataset:
        raise UsageError("training needs a non-empty dataset")
    model = model.copy()
    images = np.stack([sample.image for sample in dataset])
    targets = np.stack([sample.labels for sample in dataset]).astype(np.float64)
    if targets.shape[1] != model.config.num_classes:
        raise ShapeError(
            f"dataset has {targets.shape[1]} classes, model expects {model.config.num_classes}"
        )
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    hyper = AdamWHyper(lr=config.lr, weight_decay=config.weight_decay)
    history: List[EpochStats] = []
    n = len(dataset)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        predictions = np.zeros_like(targets)
        total = 0.0
        batches = range(0, n, config.batch_size)
        for start in tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=not progress):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            try:
                logits, _ = model.forward(images[idx])
                loss = bce_multilabel_loss(logits, targets[idx])
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"loss became {value} during epoch {epoch}", epoch=epoch)
                loss.backward()
            except NumericError as exc:
                raise TrainingError(f"training diverged during epoch {epoch}: {exc}", epoch=epoch) from exc
            optimizer_step(
                {name: p.data for name, p in model.params.items()},
                {name: p.grad for name, p in model.params.items()},
                state,
                hyper,
            )
            total += value * len(idx)
            predictions[idx] = (logits.data > 0.0).astype(np.float64)
        stats = EpochStats(epoch=epoch, loss=total / n, accuracy=macro_accuracy(predictions, targets))
        history.append(stats)
        logger.info("epoch %d: loss %.5f, macro accuracy %.4f", epoch, stats.loss, stats.accuracy)
    return model, history


def evaluate_accuracy(model: ViTModel, dataset: Sequence[Sample], batch_size: int = 64) -> float:
    """Macro multi-label accuracy of ``model`` at sigmoid threshold 0.5."""
    if not dataset:
        raise UsageError("evaluation needs a non-empty dataset")
    images = np.stack([sample.image for sample in dataset])
    targets = np.stack([sample.labels for sample in dataset]).astype(np.float64)
    probs = np.concatenate(
        [model.predict_proba(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    )
    return macro_accuracy((probs > 0.5).astype(np.float64), targets)
