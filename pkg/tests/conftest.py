"""
File: conftest.py

Overview:
Shared pytest fixtures for the low-rank training test-suite. Everything is
seeded so each test sees the same arrays on every run.

Fixtures:
- `rng`: seeded numpy generator.
- `mlp_spec` / `mlp_network`: a small dense network (8 -> 16 -> 16 -> 3).
- `conv_spec` / `conv_network`: a small conv network on 2x6x6 inputs.
- `named_spec`: the dense network with generated layer ids.
- `tiny_dataset`: a planted rank-2 classification task matching `mlp_spec`.
- `fast_config`: a short TrainConfig for end-to-end driver tests.
- `write_config`: writes a TrainConfig to a JSON file for CLI tests.
"""

# Standard library imports
from builtins import range, str

# Third-party imports
import numpy as np
import pytest
from faker import Faker

# Application-specific imports
from app.dependencies import get_settings
from app.models.network_model import build_network
from app.schemas.config_schemas import LayerSpec, ModelSpec, RankEstimatorConfig, StabilizationConfig, TrainConfig
from app.services.dataset_service import synthetic_rank2

fake = Faker()
Faker.seed(0)

settings = get_settings()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mlp_spec():
    return ModelSpec(
        input_shape=[8],
        num_classes=3,
        layers=[
            LayerSpec(kind="dense", out_features=16),
            LayerSpec(kind="dense", out_features=16),
            LayerSpec(kind="dense", out_features=3, activation="none"),
        ],
    )


@pytest.fixture
def mlp_network(mlp_spec, rng):
    return build_network(mlp_spec, rng)


@pytest.fixture
def conv_spec():
    return ModelSpec(
        input_shape=[2, 6, 6],
        num_classes=3,
        layers=[
            LayerSpec(kind="conv", out_channels=4, kernel_size=3),
            LayerSpec(kind="conv", out_channels=6, kernel_size=3),
            LayerSpec(kind="conv", out_channels=6, kernel_size=1),
            LayerSpec(kind="flatten"),
            LayerSpec(kind="dense", out_features=3, activation="none"),
        ],
    )


@pytest.fixture
def conv_network(conv_spec, rng):
    return build_network(conv_spec, rng)


@pytest.fixture
def named_spec():
    names = []
    while len(names) < 3:
        name = fake.unique.word()
        if name not in names:
            names.append(name)
    return ModelSpec(
        input_shape=[8],
        num_classes=3,
        layers=[
            LayerSpec(kind="dense", out_features=16, name=names[0]),
            LayerSpec(kind="dense", out_features=16, name=names[1]),
            LayerSpec(kind="dense", out_features=3, name=names[2]),
        ],
    )


@pytest.fixture
def tiny_dataset():
    return synthetic_rank2(seed=3, samples=256, features=8, num_classes=3)


@pytest.fixture
def fast_config(mlp_spec):
    return TrainConfig(
        total_epochs=8,
        batch_size=32,
        learning_rate=0.05,
        seed=11,
        forced_K=1,
        estimator=RankEstimatorConfig(mode="stable"),
        stabilization=StabilizationConfig(epsilon=1e9, window=2, min_epochs=3),
        model=mlp_spec,
    )


@pytest.fixture
def write_config(tmp_path):
    def _write(config: TrainConfig, name: str = "config.json"):
        path = tmp_path / name
        path.write_text(config.model_dump_json(by_alias=True), encoding="utf-8")
        return path
    return _write


@pytest.fixture
def random_matrices(rng):
    return [rng.standard_normal((int(rng.integers(1, 65)), int(rng.integers(1, 65)))) for _ in range(100)]
