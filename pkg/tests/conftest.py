import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def bench_interface():
    """Two-stage bench with interface-only ports (CMS-reducible)."""
    from modlink import StageModelConfig, make_two_stage_bench

    return make_two_stage_bench(StageModelConfig(port_set="interface"))


@pytest.fixture(scope="session")
def bench_full():
    """Two-stage bench with a port on every node (static ground truth)."""
    from modlink import StageModelConfig, make_two_stage_bench

    return make_two_stage_bench(StageModelConfig())
