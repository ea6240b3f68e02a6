import numpy as np
import pytest

from numtrack import (EquilibriumSolver, ProblemInstance, builtin_figure1,
                      build_channel_process)

SIGMA2 = 0.25 / 10.0  # reference power 1/(2*2) at 10 dB SNR


def make_fig1_problem(aux_concavity=0.0, weight=1.0):
    topo, routing = builtin_figure1(num_subbands=2)
    return ProblemInstance(topo, routing,
                           utility_weights=np.full(8, weight),
                           noise_power=SIGMA2, aux_concavity=aux_concavity)


def make_process(seed=1, epsilon=0.05, num_states=3):
    keys = [(l, n) for l in range(1, 9) for n in (1, 2)]
    return build_channel_process(keys, num_states, epsilon, rng_seed=seed)


def random_states(process, count, seed=0):
    rng = np.random.default_rng(seed)
    return [process.state_at(rng.integers(0, 3, process.num_chains))
            for _ in range(count)]


def interior_points(problem, count, seed=0):
    rng = np.random.default_rng(seed)
    return [np.abs(rng.normal(0.3, 0.2, problem.layout.dim)) + 0.05
            for _ in range(count)]


@pytest.fixture(scope="session")
def bare_problem():
    """Plain sum-log instance (no concavity term): the formula reference."""
    return make_fig1_problem()


@pytest.fixture(scope="session")
def scenario_problem():
    """Experiment-grade instance: weight 5, strict concavity 0.5."""
    return make_fig1_problem(aux_concavity=0.5, weight=5.0)


@pytest.fixture(scope="session")
def scenario_solver(scenario_problem):
    return EquilibriumSolver(scenario_problem, tolerance=1e-6)
