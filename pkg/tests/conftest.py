import numpy as np
import pytest

# filled by tests/test_acceptance.py, echoed in the terminal summary
CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

from sfa_lab.forecaster import ArchConfig, ForecastModel, init_params
from sfa_lab.graph import SensorGraph, WindowSpec


def random_graph(n, seed=0, density=0.5):
    rng = np.random.default_rng(seed)
    W = rng.uniform(0.2, 1.0, size=(n, n)) * (rng.uniform(size=(n, n)) < density)
    W = np.triu(W, 1)
    W = W + W.T
    pos = rng.uniform(size=(n, 2))
    return SensorGraph(W, positions=pos)


def small_model(n=5, N=6, M=3, hidden=4, seed=0, jitter=0.3):
    """A small untrained model with perturbed weights so every path is active."""
    rng = np.random.default_rng(seed + 100)
    g = random_graph(n, seed)
    p = init_params(ArchConfig(n, N, hidden, 3), mean=50.0, std=10.0, seed=seed)
    for k in p.arrays:
        p.arrays[k] += rng.normal(0, jitter, p.arrays[k].shape)
    return ForecastModel(p, g, WindowSpec(N, M))


@pytest.fixture
def toy_model():
    return small_model()


ACCEPTANCE_ATTACKS = (
    [{"method": "sfa", "sqrt_xi": x, "locator": "de"} for x in (5.0, 10.0, 15.0, 20.0)]
    + [{"method": "sfa", "sqrt_xi": 15.0, "locator": "deg"},
       {"method": "gwn", "sqrt_xi": 15.0, "locator": "de"},
       {"method": "full-inverse", "sqrt_xi": 15.0},
       {"method": "full-direct", "sqrt_xi": 15.0},
       {"method": "mfgsm", "epsilon": 2.0},
       {"method": "mfgsm", "epsilon": 3.0}]
)


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    """The seeded synthetic benchmark (n=50, 30 days) run end to end once per session."""
    import json
    import time
    from pathlib import Path

    from sfa_lab import pipeline as pl

    cfg = json.loads((Path(__file__).parent / "acceptance_profile.json").read_text())
    root = tmp_path_factory.mktemp("benchmark")
    t0 = time.perf_counter()
    run = pl.run_pipeline(root, cfg, attacks=ACCEPTANCE_ATTACKS, locators=["de"], report=True)
    return run, time.perf_counter() - t0
