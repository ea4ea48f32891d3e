import numpy as np
import pytest
import torch
from torch.utils.data import DataLoader

from conftest import write_fake_cifar10
from models.batches import ImageBatch
from models.exceptions import ConfigurationError, ContractError, IngestionError
from models.schemas import AugmentationConfig
from services.view_pipeline import (
    SYNTHETIC_CLASSES,
    VIEW_STREAM,
    ViewBatchDataset,
    augment_image,
    blur_kernel_size,
    epoch_steps,
    keyed_rng,
    load_dataset,
    make_views,
    synthetic_gratings,
)


class TestLoadDataset:
    def test_cifar10_layout(self, cifar_root):
        train = load_dataset("cifar10", str(cifar_root), "train")
        held_out = load_dataset("cifar10", str(cifar_root), "eval")
        assert len(train) == 100
        assert len(held_out) == 20
        assert train.images.shape[1:] == (32, 32, 3)
        assert train.num_classes == 10
        assert train.ids[0].startswith("cifar10/train/")

    def test_limit_and_order_follow_the_seed(self, cifar_root):
        a = load_dataset("cifar10", str(cifar_root), "train", limit=30, seed=4)
        b = load_dataset("cifar10", str(cifar_root), "train", limit=30, seed=4)
        c = load_dataset("cifar10", str(cifar_root), "train", limit=30, seed=5)
        assert len(a) == 30
        assert a.ids == b.ids
        assert a.ids != c.ids

    def test_zero_limit_gives_empty_collection(self, cifar_root):
        assert len(load_dataset("cifar10", str(cifar_root), "train", limit=0)) == 0

    def test_missing_files_name_the_path(self, tmp_path):
        with pytest.raises(IngestionError) as info:
            load_dataset("cifar10", str(tmp_path), "train")
        assert "cifar-10-batches-py" in info.value.path

    def test_unknown_dataset(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_dataset("mnist", str(tmp_path))

    def test_unknown_split(self, cifar_root):
        with pytest.raises(ConfigurationError):
            load_dataset("cifar10", str(cifar_root), "validation")

    def test_synthetic_needs_no_files(self, tmp_path):
        collection = load_dataset("synthetic", str(tmp_path), "eval", limit=50)
        assert len(collection) == 50
        assert collection.num_classes == SYNTHETIC_CLASSES

    def test_batch_scales_and_resizes(self, cifar_root):
        collection = load_dataset("cifar10", str(cifar_root), "train", limit=8)
        batch = collection.batch(np.arange(4), resolution=16)
        assert batch.data.shape == (4, 3, 16, 16)
        batch.check_values()


class TestSyntheticGratings:
    def test_deterministic(self):
        a, la = synthetic_gratings(20, seed=3)
        b, lb = synthetic_gratings(20, seed=3)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(la, lb)

    def test_shapes(self):
        images, labels = synthetic_gratings(12, seed=0, size=24)
        assert images.shape == (12, 24, 24, 3) and images.dtype == np.uint8
        assert labels.min() >= 0 and labels.max() < SYNTHETIC_CLASSES


class TestAugmentation:
    def test_views_have_the_configured_resolution(self):
        batch = ImageBatch(data=torch.rand(3, 3, 32, 32), ids=["a", "b", "c"])
        v1, v2 = make_views(batch, AugmentationConfig(resolution=24), np.random.default_rng(0))
        assert v1.data.shape == (3, 3, 24, 24)
        assert v2.ids == ["a", "b", "c"]
        v1.check_values()
        v2.check_values()

    def test_views_reproducible_from_generator(self):
        batch = ImageBatch(data=torch.rand(2, 3, 16, 16))
        cfg = AugmentationConfig(resolution=16)
        a = make_views(batch, cfg, keyed_rng(0, 1, 2, VIEW_STREAM))
        b = make_views(batch, cfg, keyed_rng(0, 1, 2, VIEW_STREAM))
        torch.testing.assert_close(a[0].data, b[0].data, rtol=0, atol=0)
        torch.testing.assert_close(a[1].data, b[1].data, rtol=0, atol=0)

    def test_two_views_differ(self):
        batch = ImageBatch(data=torch.rand(2, 3, 16, 16))
        v1, v2 = make_views(batch, AugmentationConfig(resolution=16), np.random.default_rng(1))
        assert not torch.equal(v1.data, v2.data)

    def test_disabled_pipeline_is_identity(self):
        img = torch.rand(3, 16, 16)
        out = augment_image(img, AugmentationConfig.disabled(resolution=16), np.random.default_rng(0))
        torch.testing.assert_close(out, img)

    def test_one_pixel_image(self):
        img = torch.rand(3, 1, 1)
        out = augment_image(img, AugmentationConfig(resolution=4), np.random.default_rng(0))
        assert out.shape == (3, 4, 4)

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            make_views(ImageBatch(data=torch.zeros(0, 3, 8, 8)), AugmentationConfig(), np.random.default_rng(0))

    @pytest.mark.parametrize("seed", range(5))
    def test_grayscale_views_have_equal_channels(self, seed):
        cfg = AugmentationConfig(resolution=16, grayscale_prob=1.0)
        out = augment_image(torch.rand(3, 20, 20), cfg, np.random.default_rng(seed))
        torch.testing.assert_close(out[0], out[1], atol=1e-6, rtol=0)
        torch.testing.assert_close(out[0], out[2], atol=1e-6, rtol=0)

    def test_default_jitter_strength(self):
        cfg = AugmentationConfig()
        assert (cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue) == (0.8, 0.8, 0.8, 0.2)
        assert (cfg.color_jitter_prob, cfg.grayscale_prob, cfg.blur_prob) == (0.8, 0.2, 0.5)

    @pytest.mark.parametrize("resolution, expected", [(32, 3), (64, 7), (224, 23)])
    def test_blur_kernel_is_odd(self, resolution, expected):
        assert blur_kernel_size(AugmentationConfig(resolution=resolution)) == expected


class TestViewBatchDataset:
    def test_drops_trailing_batch(self, tmp_path):
        collection = load_dataset("synthetic", str(tmp_path), "train", limit=20)
        dataset = ViewBatchDataset(collection, AugmentationConfig(resolution=16), batch_size=8, seed=0, epoch=0)
        assert len(dataset) == 2
        item = dataset[1]
        assert item["x1"].shape == (8, 3, 16, 16)
        assert item["step"] == 1

    def test_epochs_reshuffle(self, tmp_path):
        collection = load_dataset("synthetic", str(tmp_path), "train", limit=32)
        cfg = AugmentationConfig(resolution=16)
        first = ViewBatchDataset(collection, cfg, 8, seed=0, epoch=0)[0]["ids"]
        second = ViewBatchDataset(collection, cfg, 8, seed=0, epoch=1)[0]["ids"]
        assert first != second

    def test_stream_independent_of_workers(self, tmp_path):
        collection = load_dataset("synthetic", str(tmp_path), "train", limit=24)
        dataset = ViewBatchDataset(collection, AugmentationConfig(resolution=16), 8, seed=3, epoch=2)
        serial = list(DataLoader(dataset, batch_size=None, num_workers=0))
        parallel = list(DataLoader(dataset, batch_size=None, num_workers=2))
        for a, b in zip(serial, parallel):
            torch.testing.assert_close(a["x1"], b["x1"], rtol=0, atol=0)
            torch.testing.assert_close(a["x2"], b["x2"], rtol=0, atol=0)

    def test_batch_size_below_two(self, tmp_path):
        collection = load_dataset("synthetic", str(tmp_path), "train", limit=8)
        with pytest.raises(ConfigurationError):
            ViewBatchDataset(collection, AugmentationConfig(), batch_size=1, seed=0, epoch=0)

    def test_fake_cifar_views(self, tmp_path):
        root = write_fake_cifar10(tmp_path / "cifar", per_batch=4)
        collection = load_dataset("cifar10", str(root), "train")
        dataset = ViewBatchDataset(collection, AugmentationConfig(resolution=32), 4, seed=0, epoch=0)
        assert len(dataset) == 5


@pytest.mark.parametrize("num_images, batch_size, steps", [(20, 8, 2), (64, 64, 1), (2000, 64, 31)])
def test_epoch_steps(num_images, batch_size, steps):
    assert epoch_steps(num_images, batch_size) == steps


def test_epoch_steps_needs_one_full_batch():
    with pytest.raises(ConfigurationError):
        epoch_steps(7, 8)
