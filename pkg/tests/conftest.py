import numpy as np
import pytest

from orthodefense.data import gen_synthetic
from orthodefense.nn import OptimizerSpec, mlp_arch
from orthodefense.ortho import OrthoConfig, train_ordinary


@pytest.fixture(scope="session")
def small_data():
    ds = gen_synthetic(3, 300, 6, seed=11, contrast=0.2)
    return ds.split(0.3, seed=0)


@pytest.fixture(scope="session")
def small_model(small_data):
    train, val = small_data
    arch = mlp_arch(train.image_shape, 3, hidden=16)
    cfg = OrthoConfig(0.0, 10, 20, OptimizerSpec(lr=0.02, batch_size=32), seed=3)
    model, _ = train_ordinary(arch, train, val, cfg)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def acceptance(pytestconfig):
    """Record one pass/fail line for the terminal summary."""

    def record(label, ok, detail):
        line = f"{label:<44} {'PASS' if ok else 'FAIL'}  {detail}"
        pytestconfig.stash[ACCEPTANCE].append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
