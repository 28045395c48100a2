import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from masa_tcn.numeric import Tape, Tensor

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def numeric_grad(fn, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def tape_grads(loss_fn, *tensors):
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [t.grad for t in tensors]


def check_grads(loss_fn, *tensors, tol: float = 1e-4):
    analytic = tape_grads(loss_fn, *tensors)
    for t, a in zip(tensors, analytic):
        num = numeric_grad(lambda: loss_fn().item(), t.data)
        assert rel_error(a, num) < tol, t.name


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr, name=None):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=name)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
