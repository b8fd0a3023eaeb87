import sys

import numpy as np
import pytest

from xcae import kernels
from xcae.dataset import MiniBatch
from xcae.numerics import SeededRng
from xcae.shapley import ValueFunctionConfig
from xcae.sscae import Layout, SSCaeModel, init_model

BACKENDS = list(kernels.BACKENDS)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def small_sigmoid_layout() -> Layout:
    """6-8-4-2 encoder mirrored by a 2-4-8-6 decoder, sigmoid everywhere (smooth for FD checks)."""
    dims = (6, 8, 4, 2, 4, 8, 6)
    return Layout(dims, ("sigmoid",) * 6, n_enc=3)


def small_relu_layout() -> Layout:
    return Layout((5, 7, 3, 7, 5), ("relu", "relu", "relu", "sigmoid"), n_enc=2)


def random_model(layout: Layout, seed: int, scale: float = 1.0) -> SSCaeModel:
    rng = SeededRng(seed)
    model = init_model(layout, rng)
    model.params = model.params + scale * 0.3 * rng.normal(model.params.size)
    return model


def make_batch(X, y=None, alpha=None) -> MiniBatch:
    n = len(X)
    y = np.zeros(n) if y is None else np.asarray(y, dtype=np.float64)
    alpha = np.zeros(n) if alpha is None else np.asarray(alpha, dtype=np.float64)
    n_lab = int(np.count_nonzero(alpha))
    return MiniBatch(np.asarray(X, dtype=np.float64), y, alpha, np.arange(n), n_lab)


class LinearFixture:
    """f(x) = w.x on uniform [0,1]^8 rows; Shapley values are w_i (x_i - mu_i) under mean fill."""

    d = 8

    def __init__(self, seed: int = 123, n_train: int = 2000, n_hold: int = 100):
        r = SeededRng(seed)
        self.w = np.linspace(-1.0, 1.0, self.d)
        self.X = r.random((n_train, self.d))
        self.X_hold = r.random((n_hold, self.d))
        self.mu = self.X.mean(axis=0)
        self.vf = ValueFunctionConfig.mean(self.mu)

    def f(self, Z):
        return np.asarray(Z, dtype=np.float64) @ self.w

    def exact(self, Z):
        return self.w * (np.asarray(Z) - self.mu)


@pytest.fixture(scope="session")
def linear():
    return LinearFixture()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(results):
        terminalreporter.write_line(results[cid])
