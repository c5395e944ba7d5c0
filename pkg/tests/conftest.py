import numpy as np
import pytest

from ldmlab import (SolverConfig, analytic_density, build_chain,
                    build_linear_spiral, reference_spiral_grid, solve_lqr_for,
                    solve_maximal_ldm, to_energy)


@pytest.fixture(scope="session")
def spiral():
    return build_linear_spiral()


@pytest.fixture(scope="session")
def grid41():
    # coarse stand-in for the reference grid; same box, integer-friendly nodes
    return reference_spiral_grid(state_count=41, action_count=21)


@pytest.fixture(scope="session")
def spiral_case_a(spiral, grid41):
    dens = analytic_density("zero-mean-gaussian", {}, grid41)
    energy = to_energy(dens)
    ldm, report = solve_maximal_ldm(energy, spiral,
                                    SolverConfig(gamma=1.0, max_sweeps=5000))
    return {"density": dens, "energy": energy, "ldm": ldm, "report": report}


@pytest.fixture(scope="session")
def spiral_case_b(spiral, grid41):
    ctrl = solve_lqr_for(spiral)
    dens = analytic_density("lqr-mean-gaussian", {"controller": ctrl}, grid41)
    energy = to_energy(dens)
    ldm, report = solve_maximal_ldm(energy, spiral,
                                    SolverConfig(gamma=1.0, max_sweeps=5000))
    return {"density": dens, "energy": energy, "ldm": ldm, "report": report}


@pytest.fixture(scope="session")
def spiral_toric(spiral, grid41):
    dens = analytic_density("toric", {}, grid41)
    energy = to_energy(dens)
    # the ring density has no fixed point under smoothing interpolation;
    # nearest-node successors make the dynamics finite and the solve exact
    ldm, report = solve_maximal_ldm(
        energy, spiral, SolverConfig(gamma=1.0, interpolation="nearest"))
    return {"density": dens, "energy": energy, "ldm": ldm, "report": report}


def solved_chain(H, K, epsilon, gamma=1.0):
    chain = build_chain(H, K, epsilon)
    grid = chain.grid()
    dens = analytic_density("chain-table", {"chain": chain}, grid)
    energy = to_energy(dens)
    ldm, report = solve_maximal_ldm(
        energy, chain, SolverConfig(gamma=gamma, interpolation="nearest"))
    return {"chain": chain, "grid": grid, "density": dens, "energy": energy,
            "ldm": ldm, "report": report}


@pytest.fixture(scope="session")
def chain_example():
    # the worked counterexample sizes: H=3, K=32, epsilon=1/16
    return solved_chain(3, 32, 1.0 / 16.0)


@pytest.fixture(scope="session")
def chain_small():
    return solved_chain(2, 4, 1.0 / 8.0)
