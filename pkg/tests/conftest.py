import pytest
import numpy as np
from models.architectures import Architecture, EncoderFamily, MIN_WIDTH_SCALE, ModelConfig
from models.dataio import ExperimentKind, SyntheticSpec, generate_synthetic, write_dataset
from models.training import TrainConfig
from tests import TINY_SHAPE
from tests.data import benchmark_config, write_config


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    """Keep a SEGBENCH_SEED from the calling shell out of the tests"""
    monkeypatch.delenv("SEGBENCH_SEED", raising=False)


@pytest.fixture
def gen():
    """Provide a fixed numpy generator"""
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Provide a 10-slice synthetic dataset (6 train, 2 val, 2 test) at 32x32"""
    return generate_synthetic(SyntheticSpec(n_slices=10, shape=TINY_SHAPE, seed=3, balanced=True))


@pytest.fixture
def dataset_manifest(tmp_path, tiny_dataset):
    """Provide the tiny dataset written to disk"""
    return write_dataset(tiny_dataset, tmp_path / "dataset")


@pytest.fixture
def tiny_train_config():
    """Provide a two-epoch training config without augmentation"""
    return TrainConfig(epochs=2, batch_size=2, augment=False, strict_repro=True, seed=7)


@pytest.fixture
def tiny_unet_config():
    """Provide a lung-segmentation Unet at the smallest width"""
    return ModelConfig.create(ExperimentKind.LUNG_SEGMENTATION, Architecture.UNET,
                              EncoderFamily.PLAIN_CONV_STACK, MIN_WIDTH_SCALE)


@pytest.fixture
def config_file(tmp_path):
    """Provide a one-cell synthetic benchmark config on disk"""
    return write_config(tmp_path / "bench.json", benchmark_config())
