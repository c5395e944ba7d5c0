import numpy as np
import pytest

from ldmlab import (DensityConfig, TransitionDataset, analytic_density,
                    build_chain, build_linear_spiral, estimate_density,
                    reference_spiral_grid, solve_lqr_for, to_energy)
from ldmlab.density import DensityError


def test_histogram_estimator_matches_histogramdd():
    grid = reference_spiral_grid(state_count=11, action_count=5)
    rng = np.random.default_rng(0)
    n = 5000
    ds = TransitionDataset(states=rng.uniform(-10, 10, size=(n, 2)),
                           actions=rng.uniform(-5, 5, size=(n, 1)),
                           next_states=np.zeros((n, 2)))
    dens = estimate_density(ds, grid, DensityConfig(estimator="histogram"))
    assert dens.role == "density"
    assert dens.values.sum() == pytest.approx(1.0, abs=1e-12)
    # node-centered bins: recompute one cell count by hand
    pts = np.hstack([ds.states, ds.actions])
    h = np.array([2.0, 2.0, 2.5])
    lo = np.array([-10.0, -10.0, -5.0])
    idx = np.rint((pts - lo) / h).astype(int)
    count = np.sum(np.all(idx == [5, 5, 2], axis=1))
    cell = (5 * 11 + 5) * 5 + 2
    assert dens.values[cell] == pytest.approx(count / n, abs=1e-12)


def test_kde_estimator_normalized():
    grid = reference_spiral_grid(state_count=11, action_count=5)
    rng = np.random.default_rng(1)
    ds = TransitionDataset(states=rng.normal(0, 2, size=(400, 2)),
                           actions=rng.normal(0, 1, size=(400, 1)),
                           next_states=np.zeros((400, 2)))
    dens = estimate_density(ds, grid, DensityConfig(estimator="gaussian-kde"))
    assert dens.values.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(dens.values >= 0)


def test_zero_mean_gaussian_uniform_states_peak_action_zero():
    grid = reference_spiral_grid(state_count=21, action_count=11)
    dens = analytic_density("zero-mean-gaussian", {}, grid)
    assert dens.values.sum() == pytest.approx(1.0, abs=1e-12)
    mat = dens.as_matrix()
    # states are weighted uniformly; the action marginal peaks at a = 0
    assert np.allclose(mat, mat[0])
    assert grid.action_coords()[np.argmax(mat[0])][0] == 0.0
    # optional gaussian state weighting concentrates mass near the origin
    shaped = analytic_density("zero-mean-gaussian", {"state_weight": 2.0}, grid)
    peak_state = int(np.argmax(shaped.as_matrix().max(axis=1)))
    assert peak_state == (10 * 21 + 10)     # origin node


def test_lqr_mean_gaussian_tracks_controller():
    sys_ = build_linear_spiral()
    grid = reference_spiral_grid(state_count=21, action_count=11)
    ctrl = solve_lqr_for(sys_)
    dens = analytic_density("lqr-mean-gaussian", {"controller": ctrl}, grid)
    assert dens.values.sum() == pytest.approx(1.0, abs=1e-12)
    # at a state far from the origin the most likely action follows the gain
    cube = dens.values.reshape(21, 21, 11)
    s = np.array([2.0, 1.0])                # gain-mean stays inside the box
    i, j = int(s[0] + 10), int(s[1] + 10)
    want = float(ctrl(s[None, :])[0, 0])
    best_a = grid.action_coords()[np.argmax(cube[i, j])]
    assert abs(best_a[0] - want) <= 0.5 + 1e-9   # within one action step


def test_toric_density_peaks_on_ring():
    grid = reference_spiral_grid(state_count=41, action_count=11)
    dens = analytic_density("toric", {}, grid)
    assert dens.values.sum() == pytest.approx(1.0, abs=1e-12)
    mat = dens.as_matrix().max(axis=1).reshape(41, 41)
    radii = np.linalg.norm(np.stack(np.meshgrid(
        np.linspace(-10, 10, 41), np.linspace(-10, 10, 41),
        indexing="ij"), axis=-1), axis=-1)
    peak_r = radii.reshape(-1)[np.argmax(mat.reshape(-1))]
    assert abs(peak_r - 5.0) < 0.6
    assert mat[20, 20] < mat.max() / 100.0     # hollow center


def test_chain_table_density_is_exact():
    chain = build_chain(2, 4, 1.0 / 8.0)
    dens = analytic_density("chain-table", {"chain": chain}, chain.grid())
    assert np.array_equal(dens.as_matrix(), chain.density_table())
    assert dens.values.sum() == 1.0


def test_analytic_density_unknown_kind():
    grid = reference_spiral_grid(state_count=11, action_count=5)
    with pytest.raises(DensityError):
        analytic_density("no-such-kind", {}, grid)


def test_to_energy_log_and_sentinel():
    chain = build_chain(2, 4, 1.0 / 8.0)
    dens = analytic_density("chain-table", {"chain": chain}, chain.grid())
    energy = to_energy(dens)
    P = dens.values
    pos = P > 0
    assert np.array_equal(energy.values[pos], -np.log(P[pos]))
    # zero-mass cells sit at the sentinel, strictly above every finite value
    assert np.all(energy.values[~pos] == energy.sentinel)
    assert energy.sentinel > energy.values[pos].max()


def test_to_energy_floor():
    grid = reference_spiral_grid(state_count=11, action_count=5)
    vals = np.full(grid.n_cells, 1.0 / grid.n_cells)
    vals[0] = 1e-15
    vals[1] += 1.0 / grid.n_cells - 1e-15
    from ldmlab import ScalarField
    dens = ScalarField(grid, vals, role="density")
    energy = to_energy(dens, floor=1e-12)
    assert energy.values[0] == energy.sentinel
