import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldmlab import (ScalarField, SolverConfig, SolverError, TransitionDataset,
                    analytic_density, build_chain, ldm_backup,
                    random_table_system, solve_maximal_ldm, to_energy,
                    verify_ldm_conditions)
from ldmlab.core import GridError, field_lookup
from ldmlab.solver import (RegressorConfig, brute_force_ldm,
                           brute_force_ldm_converged, build_stencil,
                           fitted_ldm_iteration, min_continuation, _sweep)


def random_energy_field(grid, seed, scale=5.0):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0.0, scale, size=grid.n_cells)
    return ScalarField(grid, vals, role="energy", sentinel=scale + 100.0)


def sequence_oracle(table, E, gamma, sentinel, horizon):
    """Literal min-over-action-sequences evaluation by full enumeration.

    Value of a sequence is max_t gamma^t E(s_t, a_t); once the trajectory
    leaves the table the continuation contributes gamma^(t+1) * sentinel.
    """
    n_states, n_actions = E.shape
    out = np.empty((n_states, n_actions))
    for s0 in range(n_states):
        for a0 in range(n_actions):
            best = np.inf
            for seq in itertools.product(range(n_actions), repeat=horizon):
                value = E[s0, a0]
                s, a = s0, a0
                for t, a_next in enumerate(seq):
                    ns = table.next_index[s, a]
                    if ns < 0:
                        value = max(value, gamma ** (t + 1) * sentinel)
                        break
                    value = max(value, gamma ** (t + 1) * E[ns, a_next])
                    s, a = ns, a_next
                best = min(best, value)
            out[s0, a0] = best
    return out


def test_brute_force_matches_literal_enumeration():
    table = random_table_system(4, 2, seed=5)
    rng = np.random.default_rng(5)
    E = rng.uniform(0.0, 5.0, size=(4, 2))
    for gamma in (1.0, 0.9):
        for horizon in (0, 1, 3):
            want = sequence_oracle(table, E, gamma, 105.0, horizon)
            got = brute_force_ldm(table, E, horizon, gamma, 105.0)
            assert np.array_equal(got, want)


def test_solver_equals_brute_force_on_chain():
    chain = build_chain(2, 4, 1.0 / 8.0)
    grid = chain.grid()
    energy = to_energy(analytic_density("chain-table", {"chain": chain}, grid))
    ldm, _ = solve_maximal_ldm(energy, chain,
                               SolverConfig(gamma=1.0, interpolation="nearest"))
    from ldmlab import snap_to_table
    oracle, _ = brute_force_ldm_converged(snap_to_table(chain, grid),
                                          energy.as_matrix(), 1.0,
                                          energy.sentinel)
    assert np.array_equal(ldm.as_matrix(), oracle)


def test_solver_equals_brute_force_random_table():
    table = random_table_system(6, 3, seed=9)
    energy = random_energy_field(table.grid, seed=9)
    ldm, report = solve_maximal_ldm(
        energy, table, SolverConfig(gamma=1.0, interpolation="nearest"))
    oracle, horizon = brute_force_ldm_converged(table, energy.as_matrix(), 1.0,
                                                energy.sentinel)
    assert np.array_equal(ldm.as_matrix(), oracle)
    assert report.monotone


def test_active_set_skipping_is_exact():
    # a solve must agree bit-for-bit with plain full-grid sweeps
    chain = build_chain(3, 8, 1.0 / 8.0)
    grid = chain.grid()
    energy = to_energy(analytic_density("chain-table", {"chain": chain}, grid))
    ldm, report = solve_maximal_ldm(
        energy, chain, SolverConfig(gamma=1.0, interpolation="nearest"))
    stencil = build_stencil(grid, chain, "nearest")
    G = energy.values.copy()
    for _ in range(report.sweeps):
        G = _sweep(G, energy.values, stencil, 1.0, energy.sentinel)
    assert np.array_equal(ldm.values, G)


def test_jobs_setting_does_not_change_result():
    table = random_table_system(8, 3, seed=2)
    energy = random_energy_field(table.grid, seed=2)
    runs = [solve_maximal_ldm(energy, table,
                              SolverConfig(gamma=1.0, interpolation="nearest",
                                           jobs=j))[0].values
            for j in (1, 2, None)]
    assert np.array_equal(runs[0], runs[1])
    assert np.array_equal(runs[0], runs[2])


def test_backup_requires_matching_roles():
    chain = build_chain(2, 4, 1.0 / 8.0)
    grid = chain.grid()
    energy = to_energy(analytic_density("chain-table", {"chain": chain}, grid))
    G = energy.with_values(energy.values, role="ldm")
    with pytest.raises(GridError):
        ldm_backup(G, G, chain)     # second argument must be energy-role


def test_non_convergence_raises_with_history():
    chain = build_chain(2, 4, 1.0 / 8.0)
    energy = to_energy(analytic_density("chain-table", {"chain": chain},
                                        chain.grid()))
    with pytest.raises(SolverError) as err:
        solve_maximal_ldm(energy, chain,
                          SolverConfig(gamma=1.0, interpolation="nearest",
                                       max_sweeps=1))
    assert len(err.value.residuals) == 1


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(gamma=0.0)
    with pytest.raises(ValueError):
        SolverConfig(gamma=1.1)
    with pytest.raises(ValueError):
        SolverConfig(interpolation="cubic")


# -- operator properties ------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_iterates_nondecreasing_and_dominate_energy(seed):
    table = random_table_system(5, 2, seed=seed)
    energy = random_energy_field(table.grid, seed=seed)
    G = energy.with_values(energy.values, role="ldm")
    for _ in range(6):
        nxt = ldm_backup(G, energy, table, gamma=1.0, interpolation="nearest")
        assert np.all(nxt.values >= G.values)
        assert np.all(nxt.values >= energy.values)
        G = nxt


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_backup_preserves_pointwise_order(seed):
    table = random_table_system(5, 2, seed=seed)
    e1 = random_energy_field(table.grid, seed=seed)
    rng = np.random.default_rng(seed + 1)
    e2 = ScalarField(table.grid, e1.values + rng.uniform(0, 2, e1.values.shape),
                     role="energy", sentinel=e1.sentinel + 2.0)
    g1, _ = solve_maximal_ldm(e1, table,
                              SolverConfig(gamma=1.0, interpolation="nearest"))
    g2, _ = solve_maximal_ldm(e2, table,
                              SolverConfig(gamma=1.0, interpolation="nearest"))
    assert np.all(g1.values <= g2.values + 1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=0, max_value=10_000),
       st.floats(min_value=0.1, max_value=0.9))
def test_discount_ordering(seed, gamma):
    # nonnegative energies: a smaller discount can only shrink the LDM
    table = random_table_system(5, 2, seed=seed)
    energy = random_energy_field(table.grid, seed=seed)
    g_low, _ = solve_maximal_ldm(
        energy, table, SolverConfig(gamma=gamma, interpolation="nearest"))
    g_one, _ = solve_maximal_ldm(
        energy, table, SolverConfig(gamma=1.0, interpolation="nearest"))
    assert np.all(g_low.values <= g_one.values + 1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_converged_solution_is_fixed_point(seed):
    table = random_table_system(5, 2, seed=seed)
    energy = random_energy_field(table.grid, seed=seed)
    ldm, _ = solve_maximal_ldm(energy, table,
                               SolverConfig(gamma=1.0, interpolation="nearest"))
    again = ldm_backup(ldm, energy, table, gamma=1.0, interpolation="nearest")
    assert np.array_equal(again.values, ldm.values)


def test_min_continuation_matches_kernel():
    chain = build_chain(2, 4, 1.0 / 8.0)
    grid = chain.grid()
    energy = to_energy(analytic_density("chain-table", {"chain": chain}, grid))
    ldm, _ = solve_maximal_ldm(energy, chain,
                               SolverConfig(gamma=1.0, interpolation="nearest"))
    cont = min_continuation(ldm, chain, "nearest")
    swept = _sweep(ldm.values, energy.values,
                   build_stencil(grid, chain, "nearest"), 1.0, energy.sentinel)
    assert np.array_equal(np.maximum(energy.values, cont), swept)


# -- fitted iteration ---------------------------------------------------------

def full_coverage_dataset(chain, grid):
    states, actions = grid.cell_coords()
    return TransitionDataset(states, actions, chain.step(states, actions))


def test_fitted_onehot_tracks_exact_iterates():
    chain = build_chain(2, 4, 1.0 / 8.0)
    grid = chain.grid()
    energy = to_energy(analytic_density("chain-table", {"chain": chain}, grid))

    def E_eval(s, a):
        return np.array([field_lookup(energy, si, ai) for si, ai in zip(s, a)])

    run = fitted_ldm_iteration(full_coverage_dataset(chain, grid), E_eval, grid,
                               RegressorConfig(basis="onehot", ridge=1e-10),
                               K=3, gamma=0.9, sentinel=energy.sentinel)
    assert run.epsilon_ls < 1e-5
    from ldmlab import snap_to_table
    oracle = brute_force_ldm(snap_to_table(chain, grid), energy.as_matrix(), 3,
                             0.9, energy.sentinel)
    states, actions = grid.cell_coords()
    got = run.final(states, actions)
    assert np.allclose(got, oracle.reshape(-1), atol=1e-4)


def test_fitted_rbf_losses_recorded():
    chain = build_chain(2, 4, 1.0 / 8.0)
    grid = chain.grid()
    energy = to_energy(analytic_density("chain-table", {"chain": chain}, grid))

    def E_eval(s, a):
        return np.array([field_lookup(energy, si, ai) for si, ai in zip(s, a)])

    run = fitted_ldm_iteration(full_coverage_dataset(chain, grid), E_eval, grid,
                               RegressorConfig(basis="rbf", n_centers=40),
                               K=2, gamma=0.9, sentinel=energy.sentinel)
    assert len(run.iterates) == 3           # E plus two fits
    assert len(run.losses) == 2
    assert run.epsilon_ls == max(l["rmse"] for l in run.losses)


def test_verify_ldm_conditions():
    chain = build_chain(2, 4, 1.0 / 8.0)
    grid = chain.grid()
    energy = to_energy(analytic_density("chain-table", {"chain": chain}, grid))
    ldm, _ = solve_maximal_ldm(energy, chain,
                               SolverConfig(gamma=1.0, interpolation="nearest"))
    report = verify_ldm_conditions(ldm, energy, chain, interpolation="nearest")
    assert report.ok
    # the raw energy is not closed under the backup on this system
    raw = energy.with_values(energy.values, role="ldm")
    bad = verify_ldm_conditions(raw, energy, chain, interpolation="nearest")
    assert bad.condition1_violations.size > 0
