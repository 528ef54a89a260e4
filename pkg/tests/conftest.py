import numpy as np
import pytest

from _scenes import make_sources
from semrr.data import split_dataset
from semrr.datagen import AlphaSampler, alpha_sweep, synthesize_dataset
from semrr.losses import LossWeights
from semrr.metrics import SsimParams
from semrr.model import ModelConfig
from semrr.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_sources():
    return make_sources(n_backgrounds=4, n_reflections=3, size=48, seed=2)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory, toy_sources):
    """Eight 32x32 quadruples with a 6/2 train/val split."""
    backgrounds, reflections = toy_sources
    out = tmp_path_factory.mktemp("dataset")
    manifest = synthesize_dataset(
        backgrounds, reflections, 8, AlphaSampler(kind="uniform", low=0.2, high=0.6),
        seed=11, out_dir=out, crop_size=32,
    )
    manifest = split_dataset(manifest, 0.75, seed=11)
    manifest.save(out)
    return manifest


@pytest.fixture(scope="session")
def sweep_manifest(tmp_path_factory, toy_sources):
    backgrounds, reflections = toy_sources
    out = tmp_path_factory.mktemp("sweep")
    return alpha_sweep(
        backgrounds, reflections, pairs=3, alphas=[0.2, 0.5, 0.8],
        seed=13, out_dir=out, crop_size=32,
    )


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        encoder_blocks=[[8, 1], [12, 2], [16, 2]], decoder_widths=[12, 8],
        semantic_width=8, class_count=5, seed=3,
    )


@pytest.fixture
def quick_train_config():
    return TrainConfig(steps=10, batch_size=2, crop_size=24, base_lr=0.003, momentum=0.9, seed=5)


@pytest.fixture
def smoke_weights():
    # near-zero parameter penalty so the task terms dominate on toy scenes
    return LossWeights(w4=1e-6)


@pytest.fixture
def small_ssim():
    return SsimParams(window_size=7)


@pytest.fixture(scope="session")
def short_run(tmp_path_factory, dataset):
    """One short shared training run for tests that only inspect artifacts."""
    out = tmp_path_factory.mktemp("short_run")
    config = ModelConfig(
        encoder_blocks=[[8, 1], [12, 2], [16, 2]], decoder_widths=[12, 8],
        semantic_width=8, class_count=5, seed=3,
    )
    tc = TrainConfig(steps=10, batch_size=2, crop_size=24, base_lr=0.003, momentum=0.9, seed=5)
    return train(dataset, config, LossWeights(w4=1e-6), tc, out, ssim_params=SsimParams(window_size=7))
