import os

import numpy as np
import pytest

from ceval.datasets import load_mnist
from ceval.models import (AdversarialConfig, AffineClassifier, MLPClassifier, TrainConfig,
                          train, train_adversarial)

MNIST_DIR = os.environ.get("CEVAL_MNIST_DIR", "/root/data/mnist")

ACCEPTANCE_RESULTS = {}


def have_mnist():
    return os.path.exists(os.path.join(MNIST_DIR, "t10k-images-idx3-ubyte")) or \
        os.path.exists(os.path.join(MNIST_DIR, "t10k-images.idx3-ubyte"))


requires_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST not found in {MNIST_DIR}")


def record(number, passed, detail):
    """Store one acceptance verdict for the end-of-run summary."""
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def mnist_train():
    if not have_mnist():
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    return load_mnist(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    if not have_mnist():
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    return load_mnist(MNIST_DIR, "test")


@pytest.fixture(scope="session")
def mnist_mlp(mnist_train):
    model = MLPClassifier(hidden_layer_sizes=(128,), input_shape=(1, 28, 28), num_classes=10)
    return train(model, mnist_train, TrainConfig(epochs=5, batch_size=64, seed=7))


@pytest.fixture(scope="session")
def mnist_mlp_robust(mnist_train):
    model = MLPClassifier(hidden_layer_sizes=(128,), input_shape=(1, 28, 28), num_classes=10)
    cfg = TrainConfig(epochs=5, batch_size=64, seed=7, adversarial=AdversarialConfig(0.3))
    return train_adversarial(model, mnist_train, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def affine(W, b, shape=None):
    W = np.asarray(W, dtype=float)
    return AffineClassifier.from_params(W, np.asarray(b, dtype=float), input_shape=shape)
