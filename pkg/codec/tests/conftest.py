from pathlib import Path
from typing import List

import pytest
import structlog
import torch

from app.core.config import CompressorConfig, DenoiserConfig, ModelConfig, TrainConfig, get_settings
from app.models.diffpcc import DiffusionPointCodec
from app.services.checkpoint import save_checkpoint
from app.services.geometry import PointCloud
from app.services.synthetic import sample_shape, write_fixture_set

TOY_C = 12
TOY_S = 4


def toy_config(**compressor_overrides) -> ModelConfig:
    compressor = dict(C=TOY_C, C_z=4, S=TOY_S, k_enc=4)
    compressor.update(compressor_overrides)
    return ModelConfig(
        compressor=CompressorConfig(**compressor),
        denoiser=DenoiserConfig(C=TOY_C, S=TOY_S, k=4, heads=2, label_vocab=8),
        T=10,
    )


@pytest.fixture(autouse=True)
def clear_settings_cache():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture(autouse=True)
def reset_logging():
    """CLI runs bind structlog to captured streams; undo that after each test."""
    yield
    structlog.reset_defaults()


@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator().manual_seed(0)


@pytest.fixture
def toy_model_config() -> ModelConfig:
    return toy_config()


@pytest.fixture
def toy_model(toy_model_config: ModelConfig) -> DiffusionPointCodec:
    """Untrained toy model with fixed initialization."""
    torch.manual_seed(0)
    return DiffusionPointCodec(toy_model_config)


@pytest.fixture
def toy_train_config() -> TrainConfig:
    return TrainConfig(
        lambda_=0.5, gamma=1.0, steps=3, batch=2, T=10, points_per_cloud=32, log_every=1
    )


@pytest.fixture
def toy_checkpoint(
    tmp_path: Path, toy_model: DiffusionPointCodec, toy_train_config: TrainConfig
) -> Path:
    return save_checkpoint(toy_model, tmp_path / "toy.ckpt", toy_train_config, step=0)


@pytest.fixture
def sphere_cloud(generator: torch.Generator) -> PointCloud:
    return sample_shape("sphere", 32, generator, label=0)


@pytest.fixture
def fixture_dir(tmp_path: Path) -> Path:
    """Eight labelled synthetic clouds of 48 points, one per shape."""
    root = tmp_path / "fixtures"
    write_fixture_set(root, 48, per_class=1, seed=0)
    return root


@pytest.fixture
def random_clouds(generator: torch.Generator) -> List[torch.Tensor]:
    return [torch.rand(n, 3, generator=generator, dtype=torch.float64) for n in (5, 17, 32, 64)]
