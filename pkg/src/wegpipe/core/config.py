"""Pipeline configuration: defaults, a JSON file, the environment and CLI flags."""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, Field, ValidationError, root_validator, validator

from .dataset import DataConfig
from .errors import ConfigError
from .explain import LRP_EPS, RelevanceConfig
from .label import EpomConfig
from .refine import DEFAULT_SCALES, DEFAULT_SOFT_ERASE_RATE
from .train import TrainConfig
from .utils import get_env_var
from .vit import ViTConfig

logger = logging.getLogger(__name__)

# environment variable -> dotted config key
ENV_OVERRIDES = {
    "WEGPIPE_SEED": "seed",
    "WEGPIPE_THREADS": "threads",
    "WEGPIPE_OUTPUT_DIR": "paths.output_dir",
    "WEGPIPE_DATASET_DIR": "paths.dataset_dir",
    "WEGPIPE_WEIGHTS": "paths.weights",
}


class PathsConfig(BaseModel):
    dataset_dir: str = "./data"
    weights: str = "./runs/model"
    output_dir: str = "./runs"


class DatasetConfig(BaseModel):
    synth: DataConfig = DataConfig()
    train_count: int = Field(2000, ge=0)
    val_count: int = Field(200, ge=0)


class ExplainConfig(BaseModel):
    explainer: Literal["dtd", "rollout", "cam"] = "dtd"
    blocks: Union[str, List[int]] = "last"
    positive_clamp: bool = True
    eps: float = Field(LRP_EPS, ge=0)

    @validator("blocks")
    def _check_blocks(cls, value):
        if isinstance(value, str) and value not in ("last", "all"):
            try:
                parsed = [int(part) for part in value.split(",") if part.strip()]
            except ValueError:
                raise ValueError("blocks must be 'last', 'all' or a comma list of block indices")
            if not parsed:
                raise ValueError("block set must not be empty")
        if isinstance(value, list) and not value:
            raise ValueError("block set must not be empty")
        return value

    def relevance(self) -> RelevanceConfig:
        return RelevanceConfig(eps=self.eps, positive_clamp=self.positive_clamp, blocks=self.blocks)


class RefineConfig(BaseModel):
    sr: float = Field(DEFAULT_SOFT_ERASE_RATE, gt=0, le=1)
    soft_erase: bool = True
    multi_scale: bool = False
    scales: List[float] = list(DEFAULT_SCALES)
    long_side: Optional[int] = Field(None, gt=0)

    @validator("scales")
    def _check_scales(cls, value):
        if not value or any(s <= 0 for s in value):
            raise ValueError("scales must be a non-empty list of positive factors")
        return value


class LabelConfig(EpomConfig):
    epom: bool = True
    saliency: bool = True


class PipelineConfig(BaseModel):
    seed: int = Field(0, ge=0)
    threads: Optional[int] = Field(None, gt=0)
    paths: PathsConfig = PathsConfig()
    data: DatasetConfig = DatasetConfig()
    model: ViTConfig = ViTConfig()
    train: TrainConfig = TrainConfig()
    explain: ExplainConfig = ExplainConfig()
    refine: RefineConfig = RefineConfig()
    label: LabelConfig = LabelConfig()

    @root_validator(pre=True)
    def _seed_training(cls, values):
        """Shuffling follows the run seed unless train.seed is given."""
        if "seed" not in values:
            return values
        train = values.get("train")
        if train is None:
            train = {}
        elif not isinstance(train, dict) or "seed" in train:
            return values
        return {**values, "train": {**train, "seed": values["seed"]}}

    @root_validator(skip_on_failure=True)
    def _check_consistency(cls, values):
        model, data = values["model"], values["data"].synth
        if model.num_classes != data.num_classes:
            raise ValueError(
                f"model.num_classes ({model.num_classes}) must equal data.synth.num_classes ({data.num_classes})"
            )
        if model.image_size != data.image_size:
            raise ValueError(
                f"model.image_size ({model.image_size}) must equal data.synth.image_size ({data.image_size})"
            )
        return values

    def worker_count(self) -> int:
        return self.threads or os.cpu_count() or 1


def _set_dotted(tree: Dict[str, Any], key: str, value: Any) -> None:
    node = tree
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    use_env: bool = True,
) -> PipelineConfig:
    """Build the run configuration.

    Later sources win: defaults, the JSON file at ``path``, ``WEGPIPE_*``
    environment variables (a ``.env`` file is loaded first), then
    ``overrides`` keyed by dotted field names such as ``explain.blocks``.
    """
    tree: Dict[str, Any] = {}
    if path is not None:
        try:
            tree = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")

    if use_env:
        load_dotenv(find_dotenv(usecwd=True))
        for variable, key in ENV_OVERRIDES.items():
            value = get_env_var(variable)
            if value is not None:
                _set_dotted(tree, key, value)

    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(tree, key, value)

    try:
        config = PipelineConfig.parse_obj(tree)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    logger.debug("configuration: %s", config.json())
    return config


def with_overrides(config: PipelineConfig, overrides: Mapping[str, Any]) -> PipelineConfig:
    """A validated copy of ``config`` with dotted keys replaced."""
    tree = json.loads(config.json())
    for key, value in overrides.items():
        _set_dotted(tree, key, value)
    if "seed" in overrides and "train.seed" not in overrides and config.train.seed == config.seed:
        tree["train"]["seed"] = overrides["seed"]
    try:
        return PipelineConfig.parse_obj(tree)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
