import numpy as np
import pytest

from mrverify.dataset import DatasetConfig, Split, build_dataset, synthesize_sources
from mrverify.imaging import Frame


def small_sources(count: int = 6, *, seed: int = 3):
    """Low-resolution fixtures: 96x96 images with 12-28 px components."""
    return synthesize_sources(
        count, class_count=3, size=(96, 96), seed=seed, min_side=12, max_side=28, max_instances=3
    )


@pytest.fixture(scope="session")
def sources():
    return small_sources()


@pytest.fixture(scope="session")
def manifests(tmp_path_factory, sources):
    out = tmp_path_factory.mktemp("desk")
    config = DatasetConfig(name="tiny", val_count=8, test_count=12, seed=11)
    return build_dataset(sources, config, str(out))


@pytest.fixture(scope="session")
def test_manifest(manifests):
    return manifests[Split.TEST]


@pytest.fixture(scope="session")
def val_manifest(manifests):
    return manifests[Split.VAL]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frame(rng: np.random.Generator, width: int, height: int) -> Frame:
    return Frame(rng.integers(0, 256, (height, width, 3), dtype=np.uint8))
