from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist_subset"
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "test-images-idx3-ubyte", "test-labels-idx1-ubyte")


def ensure_mnist_subset() -> Path:
    """Build the 2000/500 IDX subset from the CSV bundled with mlxtend if it is missing."""
    if all((MNIST_DIR / f).exists() for f in MNIST_FILES):
        return MNIST_DIR
    mlxtend = pytest.importorskip("mlxtend")
    from robattr.data import mnist_subset_from_csv
    csv = Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"
    mnist_subset_from_csv(csv, MNIST_DIR, 2000, 500, seed=0)
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    return ensure_mnist_subset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
