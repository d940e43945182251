import numpy as np
import pytest

from homotopy_attack.oracle import Affine, Model, SyntheticDataset, train_model

# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


class QuadraticOracle:
    """f(d) = 0.5 d'Ad - b'd; stands in for a LossOracle in solver tests."""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.evaluations = 0

    @property
    def shape(self):
        return self.b.shape

    def value(self, d):
        self.evaluations += 1
        return float(0.5 * d @ self.A @ d - self.b @ d)

    def evaluate(self, d):
        self.evaluations += 1
        g = self.A @ d - self.b
        return float(0.5 * d @ self.A @ d - self.b @ d), g


class LinearOracle:
    """f(d) = g'd."""

    def __init__(self, g):
        self.g = np.asarray(g, dtype=np.float64)

    @property
    def shape(self):
        return self.g.shape

    def value(self, d):
        return float(self.g.ravel() @ d.ravel())

    def evaluate(self, d):
        return self.value(d), self.g.copy()


def affine_model(weight, bias):
    weight = np.asarray(weight, dtype=np.float64)
    return Model((Affine(weight, np.asarray(bias, dtype=np.float64)),), (weight.shape[1],))


@pytest.fixture(scope="session")
def dataset():
    return SyntheticDataset(seed=0)


@pytest.fixture(scope="session")
def trained(dataset):
    return train_model(dataset, arch="mlp", seed=0)


@pytest.fixture(scope="session")
def trained_model(trained):
    return trained.model


@pytest.fixture(scope="session")
def correct_test_images(dataset, trained_model):
    """(index, image, label) for correctly classified test images, in test-set order."""
    out = []
    for i in range(len(dataset.x_test)):
        if trained_model.predict(dataset.x_test[i]) == dataset.y_test[i]:
            out.append((i, dataset.x_test[i], int(dataset.y_test[i])))
    return out
