from pathlib import Path

import numpy as np
import pytest

from fixformer.data import DatasetSplits, splits_from_synthetic
from fixformer.gaze import DetectionConfig, FixationSequence
from fixformer.image import ImageSample, ModelConfig
from fixformer.ragged import set_num_threads
from fixformer.synthetic import SyntheticSpec, generate

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = ROOT / 'data' / 'golden'
CONFIGS = ROOT / 'configs'


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption('--runslow', action='store_true', default=False, help='run slow end-to-end tests')


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _single_thread():
    set_num_threads(1)
    yield
    set_num_threads(1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        image_size=8,
        patch_size=4,
        d_model=8,
        n_heads=2,
        n_encoder_layers=1,
        n_integration_layers=1,
        mlp_ratio=2,
        n_classes=3
    )


def random_image(rng: np.random.Generator, size: int = 8) -> ImageSample:
    return ImageSample(rng.random((size, size)))


def random_fixations(rng: np.random.Generator, n: int) -> FixationSequence:
    starts = np.cumsum(rng.uniform(0.3, 0.6, n)) - 0.3
    durations = rng.uniform(0.1, 0.25, n)
    coords = rng.random((n, 2))
    return FixationSequence.from_rows(
        [(s, d, x, y) for s, d, (x, y) in zip(starts, durations, coords)]
    )


@pytest.fixture(scope='session')
def tiny_splits() -> DatasetSplits:
    spec = SyntheticSpec(n_train=8, n_val=4, n_test=4, image_size=8, max_fixations=6, seed=11)
    return splits_from_synthetic(generate(spec), DetectionConfig())
