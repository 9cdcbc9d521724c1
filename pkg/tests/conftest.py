"""Shared fixtures: tiny models and datasets small enough for the unit tests."""
import os
import sys
from pathlib import Path
from typing import Dict

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from wegpipe.core.dataset import DataConfig, export_split, synth_dataset  # noqa: E402
from wegpipe.core.vit import ViTConfig, ViTModel, build_model, parameter_shapes  # noqa: E402


def pytest_configure(config) -> None:
    config.addinivalue_line("markers", "slow: end-to-end run, enabled with WEGPIPE_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items) -> None:
    if os.getenv("WEGPIPE_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set WEGPIPE_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def random_model(config: ViTConfig, seed: int = 0, std: float = 0.3) -> ViTModel:
    """A model with large random weights so every path carries signal."""
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if "norm" in name and name.endswith(".weight"):
            params[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        else:
            params[name] = std * rng.standard_normal(shape)
    return ViTModel(config, params)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ViTConfig:
    return ViTConfig(
        image_size=16, patch_size=4, in_chans=3, embed_dim=8, num_heads=2, num_blocks=2, mlp_ratio=2.0, num_classes=3
    )


@pytest.fixture
def tiny_model(tiny_config: ViTConfig) -> ViTModel:
    return random_model(tiny_config, seed=7)


@pytest.fixture
def initial_model(tiny_config: ViTConfig) -> ViTModel:
    return build_model(tiny_config, seed=0)


@pytest.fixture
def tiny_data_config() -> DataConfig:
    return DataConfig(image_size=16, num_classes=3, min_shapes=1, max_shapes=2, min_radius=3, max_radius=5, saliency_blur=1)


@pytest.fixture
def tiny_samples(tiny_data_config: DataConfig):
    return synth_dataset(6, tiny_data_config, seed=3)


@pytest.fixture
def dataset_dir(tmp_path: Path, tiny_data_config: DataConfig) -> Path:
    """``train`` and ``val`` splits of the tiny synthetic dataset."""
    root = tmp_path / "data"
    export_split(synth_dataset(8, tiny_data_config, seed=1), root / "train")
    export_split(synth_dataset(4, tiny_data_config, seed=2), root / "val")
    return root


@pytest.fixture
def pipeline_config(tmp_path: Path, dataset_dir: Path, tiny_config: ViTConfig, tiny_data_config: DataConfig, tiny_model: ViTModel):
    """A run configuration over ``dataset_dir`` whose weights file holds ``tiny_model``."""
    from wegpipe.core.config import PipelineConfig
    from wegpipe.core.vit import save_weights

    save_weights(tiny_model, tmp_path / "model")
    return PipelineConfig.parse_obj(
        {
            "threads": 2,
            "paths": {
                "dataset_dir": str(dataset_dir),
                "weights": str(tmp_path / "model"),
                "output_dir": str(tmp_path / "runs"),
            },
            "data": {"synth": tiny_data_config.dict(), "train_count": 8, "val_count": 4},
            "model": tiny_config.dict(),
            "train": {"epochs": 2, "batch_size": 4},
        }
    )
