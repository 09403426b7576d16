import pytest

from sgewc.data import load_mnist
from sgewc.evaluate import train_classifier

from helpers import ACCEPTANCE_LINES, MNIST_DIR


@pytest.fixture(scope="session")
def mnist_train():
    return load_mnist(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    return load_mnist(MNIST_DIR, "test")


@pytest.fixture(scope="session")
def classifier(mnist_train):
    return train_classifier(mnist_train, seed=0, epochs=40)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
