import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make tests/synth.py importable

from synth import write_synthetic_cifar


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory) -> Path:
    """2,000 train / 1,000 test synthetic records in CIFAR-10 binary layout."""
    root = tmp_path_factory.mktemp("cifar-small")
    return write_synthetic_cifar(root, n_train=2000, n_test=1000, seed=7)


@pytest.fixture(scope="session")
def full_data_dir(tmp_path_factory) -> Path:
    """Full-size layout: 50,000 train / 10,000 test, 10,000 records per file."""
    root = tmp_path_factory.mktemp("cifar-full")
    return write_synthetic_cifar(root, n_train=50_000, n_test=10_000, seed=11)
