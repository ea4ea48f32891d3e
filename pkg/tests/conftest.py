import pickle
from pathlib import Path

import numpy as np
import pytest
import torch

from database.result_store import ResultStore
from models.schemas import (
    AugmentationConfig,
    DataConfig,
    EncoderSpec,
    EvalDatasetSpec,
    ExperimentConfig,
    HeadRole,
    HeadSpec,
    OptimizerConfig,
    ProbeConfig,
)


def make_config(method: str = "simclr", affine: bool = True, **overrides) -> ExperimentConfig:
    """A config small enough to train on CPU in well under a second per epoch."""
    payload = dict(
        method=method,
        encoder=EncoderSpec(representation_dim=16),
        projector=HeadSpec(role=HeadRole.PROJECTOR, hidden_dim=32, output_dim=16),
        predictor=HeadSpec(role=HeadRole.PREDICTOR, hidden_dim=32, output_dim=16),
        optimizer=OptimizerConfig(batch_size=8, epochs=1, learning_rate=0.03),
        augmentation=AugmentationConfig(resolution=16),
        data=DataConfig(dataset="synthetic", limit=16, num_workers=0),
        eval_datasets=[EvalDatasetSpec(name="synthetic", train_limit=60, eval_limit=40)],
        probe=ProbeConfig(trials=2, max_iter=200, batch_size=64),
        seeds=[0],
        eval_every=1,
    )
    payload.update(overrides)
    config = ExperimentConfig(**payload)
    if not affine:
        config = config.model_copy(update={"affine": config.affine.model_copy(update={"enabled": False})})
    return config


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return make_config()


@pytest.fixture
def store(tmp_path) -> ResultStore:
    return ResultStore(str(tmp_path / "runs"))


@pytest.fixture
def image_batch() -> torch.Tensor:
    generator = torch.Generator().manual_seed(0)
    return torch.rand(4, 3, 16, 16, generator=generator)


def write_fake_cifar10(root: Path, per_batch: int = 20, seed: int = 0) -> Path:
    """The cifar-10-batches-py layout with `per_batch` random images per file."""
    rng = np.random.default_rng(seed)
    base = Path(root) / "cifar-10-batches-py"
    base.mkdir(parents=True, exist_ok=True)
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        entry = {
            b"data": rng.integers(0, 256, size=(per_batch, 3 * 32 * 32), dtype=np.uint8),
            b"labels": rng.integers(0, 10, size=per_batch).tolist(),
        }
        with open(base / name, "wb") as fh:
            pickle.dump(entry, fh)
    return Path(root)


@pytest.fixture
def cifar_root(tmp_path) -> Path:
    return write_fake_cifar10(tmp_path / "data")
