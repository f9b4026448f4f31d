import pytest

from chatpainter.scenes import generate_dataset
from chatpainter.corpus import load_dataset


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """64 samples at 16 and 32 px, shared across the suite (read-only)."""
    out = tmp_path_factory.mktemp("data") / "tiny"
    generate_dataset(64, 11, (16, 32), out)
    return out


@pytest.fixture(scope="session")
def tiny_samples(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)
