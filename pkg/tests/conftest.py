import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cstnet.config import TINY  # noqa: E402
from cstnet.model import build_model  # noqa: E402
from cstnet.nn import Module  # noqa: E402

ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    return build_model(TINY, seed=0)


def randomize(module: Module, seed: int, scale: float = 0.3):
    """Give every parameter and batch-norm statistic a nontrivial random value."""
    rng = np.random.default_rng(seed)
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if name.endswith("weight") and p.ndim == 1:      # norm scales
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        else:
            p.data[...] = rng.normal(0, scale, p.shape)
    for name, owner, attr in sorted(module.named_buffers(), key=lambda t: t[0]):
        buf = owner._buffers[attr]
        val = rng.uniform(0.5, 2.0, buf.shape) if attr == "running_var" else rng.normal(0, 0.3, buf.shape)
        owner.set_buffer(attr, val.astype(buf.dtype))
    return module


@pytest.fixture(scope="session")
def overfit_result():
    """The 200-step tiny-config overfit run (seed 7), shared across modules."""
    from cstnet.training import overfit
    return overfit()
