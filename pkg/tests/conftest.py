import pytest

from lcflow import DescentConfig, RegressionBasis, TimeGrid, generate_brownian, solve_hamiltonian
from lcflow.presets import linear_terminal, p1, p1_d_variant, p2, zero_problem


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(0.0, 1.0, 50)


@pytest.fixture(scope="session")
def basis():
    return RegressionBasis(degree=2, ridge=1e-8)


@pytest.fixture(scope="session")
def cfg():
    return DescentConfig(eta="auto", max_iter=80, tol_grad=1e-3)


@pytest.fixture(scope="session")
def w_small(grid):
    # unit-test scale; antithetic keeps odd functionals exactly centered
    return generate_brownian(grid, 4000, seed=7, antithetic=True, d=1)


@pytest.fixture(scope="session")
def spec_p1():
    return p1()


@pytest.fixture(scope="session")
def spec_p1_nonoise():
    return p1(sigma=0.0)


@pytest.fixture(scope="session")
def spec_p1_d():
    return p1_d_variant()


@pytest.fixture(scope="session")
def spec_p2():
    return p2()


@pytest.fixture(scope="session")
def spec_zero():
    return zero_problem()


@pytest.fixture(scope="session")
def spec_linear_terminal():
    return linear_terminal()


@pytest.fixture(scope="session")
def sol_p1_small(spec_p1, grid, w_small, basis, cfg):
    return solve_hamiltonian(spec_p1, grid, 0.0, [0.0], w_small, basis, cfg)


@pytest.fixture(scope="session")
def sol_p2_small(spec_p2, grid, w_small, basis, cfg):
    return solve_hamiltonian(spec_p2, grid, 0.0, [0.3], w_small, basis, cfg)
