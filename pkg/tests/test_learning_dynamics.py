from pathlib import Path

import numpy as np
import pytest

from conftest import make_config
from config import settings
from database.checkpoint_store import read_metrics
from models.schemas import (
    AugmentationConfig,
    ComponentMask,
    DataConfig,
    EncoderSpec,
    EvalDatasetSpec,
    HeadRole,
    HeadSpec,
    OptimizerConfig,
    ProbeConfig,
)
from services.eval_harness import evaluate
from services.experiment_service import load_profile
from services.training_engine import fit

SMOOTHING_WINDOW = 50
CHANCE_MARGIN = 0.20
CIFAR_DIR = Path(settings.data_root) / "cifar-10-batches-py"


def with_affine(config, enabled):
    return config.model_copy(update={"affine": config.affine.model_copy(update={"enabled": enabled})})


def gratings_config(affine):
    config = make_config(
        affine=affine,
        encoder=EncoderSpec(representation_dim=64),
        projector=HeadSpec(role=HeadRole.PROJECTOR, hidden_dim=128, output_dim=64),
        predictor=HeadSpec(role=HeadRole.PREDICTOR, hidden_dim=128, output_dim=64),
        optimizer=OptimizerConfig(batch_size=32, epochs=20, learning_rate=0.03),
        augmentation=AugmentationConfig(resolution=32),
        data=DataConfig(dataset="synthetic", limit=256, num_workers=0),
        eval_datasets=[EvalDatasetSpec(name="synthetic", train_limit=500, eval_limit=300)],
        probe=ProbeConfig(trials=2, max_iter=500, batch_size=128),
        eval_every=20,
    )
    # zoom is the component a shallow pooled encoder picks up within a few hundred steps
    return config.model_copy(
        update={"affine": config.affine.model_copy(update={"components": ComponentMask.only("scale")})}
    )


def assert_affine_loss_halves(metrics_path, steps_per_epoch):
    losses = np.array([r.l_affine for r in read_metrics(metrics_path)], dtype=np.float64)
    assert len(losses) >= steps_per_epoch + SMOOTHING_WINDOW
    first_epoch = losses[:steps_per_epoch].mean()
    final = losses[-SMOOTHING_WINDOW:].mean()
    assert final < 0.5 * first_epoch, f"l_affine {first_epoch:.4f} -> {final:.4f}"


def downstream_accuracy(checkpoint, config):
    [result] = evaluate(checkpoint, config.eval_datasets)
    return result.mean


class TestGratings:
    @pytest.mark.parametrize("affine", [False, True], ids=["baseline", "affine"])
    def test_short_run_learns(self, affine, store):
        config = gratings_config(affine)
        result = fit(config, store=store)
        assert result.finished

        if affine:
            assert_affine_loss_halves(result.metrics_path, steps_per_epoch=256 // 32)
        else:
            assert all(r.l_affine is None for r in read_metrics(result.metrics_path))
        assert downstream_accuracy(result.checkpoint_path, config) > CHANCE_MARGIN


@pytest.mark.skipif(not CIFAR_DIR.exists(), reason=f"CIFAR-10 not found under {settings.data_root}")
class TestCifarSmoke:
    @pytest.mark.parametrize("affine", [False, True], ids=["baseline", "affine"])
    def test_smoke_profile_learns(self, affine, store):
        config = with_affine(load_profile("smoke"), affine)
        result = fit(config, store=store)
        assert result.finished

        if affine:
            steps_per_epoch = config.data.limit // config.optimizer.batch_size
            assert_affine_loss_halves(result.metrics_path, steps_per_epoch)
        assert downstream_accuracy(result.checkpoint_path, config) > CHANCE_MARGIN
