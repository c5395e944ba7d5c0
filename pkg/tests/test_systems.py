import numpy as np
import pytest
from scipy.linalg import expm, solve_discrete_are

from ldmlab import (ChainSystem, GaussianActionPolicy, TableSystem, build_chain,
                    build_linear_spiral, collect_dataset, fit_linear_dynamics,
                    random_table_system, reference_spiral_grid, snap_to_table,
                    solve_lqr, solve_lqr_for)
from ldmlab.systems import SystemError


def test_spiral_discretization_matches_matrix_exponential():
    beta, omega, dt = 0.1, 1.0, 0.1
    sys_ = build_linear_spiral(beta, omega, dt)
    A = np.array([[beta, omega], [-omega, beta]])
    B = np.array([[0.0], [1.0]])
    # zero-order-hold discretization via the augmented matrix exponential
    M = np.zeros((3, 3))
    M[:2, :2] = A * dt
    M[:2, 2:] = B * dt
    blk = expm(M)
    assert np.allclose(sys_.F, blk[:2, :2], atol=1e-12)
    assert np.allclose(sys_.Gmat, blk[:2, 2:], atol=1e-12)


def test_spiral_step_batches():
    sys_ = build_linear_spiral()
    s = np.array([[1.0, 0.0], [0.0, 2.0]])
    a = np.array([[0.5], [-0.5]])
    out = sys_.step(s, a)
    assert out.shape == (2, 2)
    assert np.allclose(out[0], sys_.F @ s[0] + sys_.Gmat[:, 0] * 0.5)


def test_spiral_origin_is_equilibrium():
    sys_ = build_linear_spiral()
    out = sys_.step(np.zeros((1, 2)), np.zeros((1, 1)))
    assert np.allclose(out, 0.0)


def test_lqr_matches_scipy_riccati():
    sys_ = build_linear_spiral()
    Q = np.eye(2)
    Rc = np.array([[1.0]])
    ctrl = solve_lqr(sys_.F, sys_.Gmat, Q, Rc)
    P = solve_discrete_are(sys_.F, sys_.Gmat, Q, Rc)
    expected = np.linalg.solve(Rc + sys_.Gmat.T @ P @ sys_.Gmat,
                               sys_.Gmat.T @ P @ sys_.F)
    assert np.allclose(ctrl.riccati, P, atol=1e-7)
    assert np.allclose(ctrl.gain, expected, atol=1e-8)


def test_lqr_controller_stabilizes():
    sys_ = build_linear_spiral()
    ctrl = solve_lqr_for(sys_)
    assert np.allclose(ctrl.gain, [[0.4557, 1.4822]], atol=1e-3)
    s = np.array([[3.0, -2.0]])
    for _ in range(300):
        s = sys_.step(s, ctrl(s))
    assert np.linalg.norm(s) < 1e-6


def test_reference_grid_shape():
    g = reference_spiral_grid()
    assert g.state_counts == (201, 201)
    assert g.action_counts == (101,)
    assert np.allclose(g.state_lo, [-10.0, -10.0])
    assert np.allclose(g.action_hi, [5.0])


def test_chain_parameter_validation():
    with pytest.raises(SystemError):
        build_chain(3, 32, 1.0 / 1000.0)   # 1/K > 2(H+1) epsilon
    with pytest.raises(SystemError):
        build_chain(0, 4, 0.5)


def test_chain_density_table_exact():
    chain = build_chain(3, 32, 1.0 / 16.0)
    table = chain.density_table()
    # masses are exact binary rationals and sum to exactly 1
    assert table.sum() == 1.0
    base = 1.0 / (2 * (3 + 1))
    states = chain.states
    s0 = int(np.flatnonzero(states == 0)[0])
    a_minus = 0                         # action node -1 has the lowest index
    a_plus = 2
    assert table[s0, a_minus] == base
    assert table[s0, a_plus] == base
    top = int(np.flatnonzero(states == 3)[0])
    assert np.all(table[top, 1:] == base / 32)
    assert table[top, a_minus] == 0.0


def test_chain_step_and_reward():
    chain = build_chain(2, 4, 1.0 / 8.0)
    s = np.array([[0.0], [1.0]])
    a = np.array([[1.0], [-1.0]])
    assert np.allclose(chain.step(s, a), [[1.0], [0.0]])
    assert np.allclose(chain.reward(s, a), [1.0, -1.0])


def test_snap_to_table_matches_chain_step():
    chain = build_chain(2, 4, 1.0 / 8.0)
    grid = chain.grid()
    table = snap_to_table(chain, grid)
    states, actions = grid.cell_coords()
    stepped = chain.step(states, actions)
    for i in range(grid.n_cells):
        s_idx, a_idx = divmod(i, grid.n_actions)
        ns = table.next_index[s_idx, a_idx]
        target = stepped[i, 0]
        if -2 <= target <= 2 + 4 - 1:
            assert chain.states[ns] == target
        else:
            assert ns == -1


def test_random_table_system_deterministic():
    t1 = random_table_system(6, 3, seed=7)
    t2 = random_table_system(6, 3, seed=7)
    assert np.array_equal(t1.next_index, t2.next_index)
    assert t1.next_index.shape == (6, 3)
    assert isinstance(t1, TableSystem)


def test_collect_dataset_seeded_and_bounded():
    sys_ = build_linear_spiral()
    grid = reference_spiral_grid(state_count=21, action_count=11)
    policy = GaussianActionPolicy(1.0)
    d1 = collect_dataset(sys_, grid, policy, 500, seed=3)
    d2 = collect_dataset(sys_, grid, policy, 500, seed=3)
    assert np.array_equal(d1.states, d2.states)
    assert np.array_equal(d1.actions, d2.actions)
    assert len(d1) == 500
    d1.validate_bounds(grid)


def test_fit_linear_dynamics_recovers_matrices():
    sys_ = build_linear_spiral()
    rng = np.random.default_rng(11)
    s = rng.normal(size=(400, 2))
    a = rng.normal(size=(400, 1))
    from ldmlab import TransitionDataset
    ds = TransitionDataset(s, a, sys_.step(s, a))
    model = fit_linear_dynamics(ds)
    assert np.allclose(model.F, sys_.F, atol=1e-10)
    assert np.allclose(model.Gmat, sys_.Gmat, atol=1e-10)
