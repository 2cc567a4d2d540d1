import numpy as np
import pytest

from qpatdot.config import preset
from qpatdot.forward import generate_dataset
from qpatdot.pipeline import initial_guess, make_truth


def twin(name="small", **overrides):
    """Config, truth triple and noise-free dataset for a preset."""
    cfg = preset(name, **{"noise_level": 0.0, **overrides})
    truth = make_truth(cfg)
    return cfg, truth, generate_dataset(cfg, truth)


@pytest.fixture(scope="session")
def small_dirichlet():
    return twin("small", kappa=0.0)


@pytest.fixture(scope="session")
def small_robin():
    return twin("small", kappa=0.2)


@pytest.fixture(scope="session")
def tiny():
    """Three sources, two frequencies on a 9 x 9 mesh, Robin boundary."""
    return twin("small", n=9, n_sources=3, kappa=0.2, init_smoothing_std=1.0)


@pytest.fixture(scope="session")
def small_init(small_robin):
    cfg, truth, _ = small_robin
    return initial_guess(truth, cfg)


def boundary_zero_direction(rng, mesh):
    d = rng.standard_normal(mesh.node_count)
    d[mesh.boundary_nodes] = 0.0
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
