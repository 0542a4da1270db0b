import numpy as np
import pytest

from satlstm.data import build_vocab
from satlstm.gradcheck import random_example
from satlstm.model import ModelParams, Variant
from satlstm.train import TrainConfig, init_params


def fd_grad(f, arr, step=1e-5):
    """Plain central differences, perturbing ``arr`` in place."""
    flat = arr.reshape(-1)
    out = np.zeros(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f()
        flat[k] = orig - step
        fm = f()
        flat[k] = orig
        out[k] = (fp - fm) / (2 * step)
    return out.reshape(arr.shape)


def rel_err(a, n):
    a, n = np.asarray(a, float), np.asarray(n, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def random_params(variant, example, seed=0, hidden=4, emb=3, scale=0.5, **flags) -> ModelParams:
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(embedding_size=emb, hidden_size=hidden, seed=seed, **flags)
    params = init_params(Variant.parse(variant), cfg, build_vocab([example]), rng=rng)
    for t in params:
        t.data[...] = rng.uniform(-scale, scale, size=t.shape)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_example():
    return random_example(np.random.default_rng(5), 3, 2)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
