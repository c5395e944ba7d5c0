"""Invariance verification, recoverability constants, CLF extraction, and
numerical audits of the error bounds for fitted runs.

Norm convention: ||g||_P = sum_i P_i * |g_i| over grid cells, with the density
field holding per-cell masses that sum to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (GridError, ScalarField, StateActionGrid, SublevelSet,
                   field_lookup, interp_weights)
from .solver import BruteForceLdm, _sweep, backup_targets, build_stencil, min_continuation
from .systems import ChainSystem, TableSystem, snap_to_table


class AnalysisError(ValueError):
    pass


# -- invariance --------------------------------------------------------------

@dataclass
class InvarianceReport:
    threshold: float
    violations: np.ndarray   # member cell indices with no safe continuation
    worst_deficit: float     # max over members of (min continuation - threshold)

    @property
    def ok(self) -> bool:
        return self.violations.size == 0

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "violations": self.violations.tolist(),
                "worst_deficit": self.worst_deficit}


def verify_invariance(level_set: SublevelSet, system, slack: float = 1e-6,
                      interpolation: str = "multilinear") -> InvarianceReport:
    """Check that every member cell (s, a) has some a' keeping
    (f(s,a), a') inside the sublevel set (value <= threshold + slack)."""
    fld = level_set.field
    if level_set.members.size == 0:
        return InvarianceReport(level_set.threshold, np.zeros(0, dtype=np.int64), -np.inf)
    cont = min_continuation(fld, system, interpolation)[level_set.members]
    deficit = cont - level_set.threshold
    bad = deficit > slack
    return InvarianceReport(level_set.threshold, level_set.members[bad],
                            float(deficit.max()))


# -- recoverability ----------------------------------------------------------

@dataclass
class RecoverabilityReport:
    R: float
    r: float
    witness_start: int            # flat cell index achieving R
    witness_trajectory: list      # greedy cell path toward the density peak

    def to_dict(self) -> dict:
        return {"R": self.R, "r": self.r, "witness_start": self.witness_start,
                "witness_trajectory": list(self.witness_trajectory)}


def compute_recoverability(density: ScalarField, system,
                           interpolation: str = "multilinear",
                           tolerance: float = 1e-12,
                           max_iters: int = 100000) -> RecoverabilityReport:
    """Max-reachable-density DP: M = max{P, max_a' M(f(s,a), a')} iterated to
    a fixed point; R = max over P>0 cells of M/P. Off-grid successors
    contribute nothing (density 0 outside the box)."""
    if density.role != "density":
        raise AnalysisError("compute_recoverability requires a density field")
    grid = density.grid
    P = density.values
    positive = P > 0
    if not np.any(positive):
        raise AnalysisError("density has no positive cells")
    stencil = build_stencil(grid, system, interpolation)

    def max_continuation(values: np.ndarray) -> np.ndarray:
        mat = values.reshape(grid.n_states, grid.n_actions)
        best = np.full(grid.n_cells, -np.inf)
        for k in range(grid.n_actions):
            vals = (stencil.weights * mat[stencil.corners, k]).sum(axis=1)
            best = np.maximum(best, vals)
        best[stencil.oob] = 0.0
        return best

    M = P.copy()
    for _ in range(max_iters):
        nxt = np.maximum(P, max_continuation(M))
        if np.max(np.abs(nxt - M)) <= tolerance:
            M = nxt
            break
        M = nxt
    else:
        raise AnalysisError("recoverability DP did not reach a fixed point")

    ratios = M[positive] / P[positive]
    R = float(ratios.max())
    pos_idx = np.flatnonzero(positive)
    start = int(pos_idx[int(np.argmax(ratios))])

    # one-step recoverability: best next-cell density over current density
    P_next_best = max_continuation(P)
    r = float((P_next_best[positive] / P[positive]).max())

    trajectory = _greedy_density_path(grid, system, density, M, start,
                                      interpolation)
    return RecoverabilityReport(R=R, r=r, witness_start=start,
                                witness_trajectory=trajectory)


def _greedy_density_path(grid, system, density, M, start, interpolation,
                         max_len=None):
    """Follow the DP gradient from the witness start toward the cell whose
    own density realizes M; snaps successors to nearest state nodes."""
    from .core import cell_to_coords
    max_len = max_len or grid.n_states + 1
    path = [start]
    current = start
    P = density.values
    Mmat = M.reshape(grid.n_states, grid.n_actions)
    for _ in range(max_len):
        if M[current] <= P[current] * (1.0 + 1e-9):
            break
        state, action = cell_to_coords(grid, current)
        nxt = system.step(state[None, :], action[None, :])
        corners, weights, in_domain = interp_weights(
            grid.state_lo, grid.state_spacing(), grid.state_counts, nxt,
            mode="nearest")
        if not in_domain[0]:
            break
        s_flat = int(corners[0, 0])
        a_best = int(np.argmax(Mmat[s_flat]))
        current = s_flat * grid.n_actions + a_best
        path.append(current)
    return path


# -- CLF extraction ----------------------------------------------------------

def extract_clf(G: ScalarField, equilibrium_state, equilibrium_action) -> ScalarField:
    """State-only candidate Lyapunov function W(s) = min_a G(s, a) - G(s_e, a_e).

    Requires G to attain its global minimum at the declared equilibrium cell.
    """
    from .core import cell_to_coords, coords_to_cell
    if G.role != "ldm":
        raise AnalysisError("extract_clf requires an ldm-role field")
    grid = G.grid
    eq_cell = coords_to_cell(grid, equilibrium_state, equilibrium_action)
    g_min = float(G.values.min())
    if G.values[eq_cell] > g_min + 1e-12:
        argmin_state, argmin_action = cell_to_coords(grid, int(np.argmin(G.values)))
        raise AnalysisError(
            f"field minimum is at state {argmin_state}, action {argmin_action}, "
            f"not at the declared equilibrium")
    W = G.min_over_actions() - G.values[eq_cell]
    state_grid = StateActionGrid(grid.state_lo, grid.state_hi, grid.state_counts,
                                 [], [], ())
    # W inherits G's off-domain semantics: lookups outside the state box
    # return the shifted sentinel (the value of cells doomed to leave)
    return ScalarField(state_grid, W, role="ldm",
                       sentinel=G.sentinel - float(G.values[eq_cell]))


# -- bound audits ------------------------------------------------------------

@dataclass
class BoundAudit:
    name: str
    lhs: float
    rhs: float
    inputs: dict = field(default_factory=dict)
    applicable: bool = True
    extra: dict = field(default_factory=dict)

    @property
    def satisfied(self) -> bool:
        return self.applicable and self.lhs <= self.rhs + 1e-9

    def to_dict(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs,
                "inputs": self.inputs, "applicable": self.applicable,
                "satisfied": self.satisfied, "margin": self.rhs - self.lhs,
                "extra": self.extra}


def _iterate_values(iterate, states, actions) -> np.ndarray:
    if callable(iterate):
        return np.asarray(iterate(states, actions), dtype=float)
    return np.asarray(iterate, dtype=float).reshape(-1)


def audit_fqi_bound(iterates: list, oracle: np.ndarray, density: ScalarField,
                    system, gamma: float, sentinel: float,
                    E_values: np.ndarray | None = None,
                    R: float | None = None, r: float | None = None,
                    k_fin: int | None = None, eps_fin: float = 0.0,
                    interpolation: str = "multilinear") -> BoundAudit:
    """Audit the fitted-iteration error bound.

    lhs = P-weighted distance of the final iterate from the oracle fixed
    point; rhs = R*eps_ls/(1-gamma) + gamma^K * sup|E - oracle| (gamma < 1),
    or R*k_fin*eps_ls + eps_fin (gamma = 1, finite-convergence constants
    supplied by the caller). eps_ls is measured against the true density:
    max_t ||G_{t+1} - T G_t||_P over all grid cells.
    """
    grid = density.grid
    P = density.values
    states, actions = grid.cell_coords()
    stencil = build_stencil(grid, system, interpolation)
    next_states = system.step(states, actions)

    vals = [_iterate_values(it, states, actions) for it in iterates]
    if E_values is None:
        E_values = vals[0]
    E_values = np.asarray(E_values, dtype=float).reshape(-1)
    K = len(iterates) - 1

    def apply_backup(idx: int) -> np.ndarray:
        it = iterates[idx]
        if callable(it):
            return backup_targets(it, E_values, next_states, grid, gamma, sentinel)
        return _sweep(vals[idx], E_values, stencil, gamma, sentinel)

    per_step = []
    for t in range(K):
        target = apply_backup(t)
        per_step.append(float(np.sum(P * np.abs(vals[t + 1] - target))))
    eps_ls = max(per_step) if per_step else 0.0

    oracle = np.asarray(oracle, dtype=float).reshape(-1)
    lhs = float(np.sum(P * np.abs(vals[-1] - oracle)))
    sup_term = float(np.max(np.abs(E_values - oracle)))
    p_term = float(np.sum(P * np.abs(E_values - oracle)))

    if R is None:
        R = compute_recoverability(density, system, interpolation).R
    inputs = {"gamma": gamma, "K": K, "R": R, "epsilon_ls": eps_ls,
              "sup_norm_term": sup_term}
    extra = {"per_iteration_P_norms": per_step}

    if gamma == 1.0:
        if k_fin is None:
            raise AnalysisError(
                "gamma = 1 requires the finite-convergence form: supply k_fin "
                "(and eps_fin)")
        rhs = R * k_fin * eps_ls + eps_fin
        inputs.update({"k_fin": k_fin, "eps_fin": eps_fin})
        return BoundAudit("fqi-gamma1", lhs, rhs, inputs, extra=extra)

    rhs = R * eps_ls / (1.0 - gamma) + gamma ** K * sup_term
    if r is not None:
        inputs["r"] = r
        if gamma < 1.0 / r:
            extra["one_step_rhs"] = eps_ls / (1.0 - r * gamma) \
                + (r * gamma) ** K * p_term
        else:
            extra["one_step_rhs"] = None  # gamma >= 1/r: variant inapplicable
    return BoundAudit("fqi", lhs, rhs, inputs, extra=extra)


def _finite_best_log_density(table: TableSystem, P_table: np.ndarray,
                             start_state: int, n_steps: int) -> np.ndarray:
    """best[t] = max log P(s_t, a_t) over states reachable in exactly t steps."""
    n_states, n_actions = P_table.shape
    with np.errstate(divide="ignore"):
        logP = np.where(P_table > 0, np.log(np.where(P_table > 0, P_table, 1.0)),
                        -np.inf)
    reach = np.zeros(n_states, dtype=bool)
    reach[start_state] = True
    best = np.empty(n_steps + 1)
    for t in range(n_steps + 1):
        best[t] = logP[reach].max() if reach.any() else -np.inf
        nxt = np.zeros(n_states, dtype=bool)
        succ = table.next_index[reach].reshape(-1)
        succ = succ[succ >= 0]
        nxt[succ] = True
        reach = nxt
    return best


def audit_rollout_guarantee(rollout, density: ScalarField, system, c: float,
                            gamma: float, R: float, epsilon_ls: float,
                            epsilon_p: float = 0.0, k_fin: int | None = None,
                            eps_fin: float = 0.0,
                            ldm: ScalarField | None = None) -> BoundAudit:
    """Audit the per-step density guarantee of constrained rollouts.

    For each step t the best achievable log P(s_t, a_t) over continuations
    from the rollout's start state must clear the bound. Finite systems use
    exact forward reachability; otherwise the rollout's own densities serve
    as an achievability lower bound (optionally improved by a greedy pass on
    a supplied LDM field).
    """
    if not 0 < c <= 1:
        raise AnalysisError("c must lie in (0, 1]")
    n_steps = len(rollout.densities)
    t_arr = np.arange(n_steps, dtype=float)
    if gamma == 1.0:
        if k_fin is None:
            raise AnalysisError("gamma = 1 requires k_fin (and eps_fin)")
        bound = np.full(n_steps, np.log(c)
                        - (R * k_fin * epsilon_ls + eps_fin) * np.exp(epsilon_p) / c
                        - epsilon_p)
    else:
        inv = gamma ** (-t_arr)
        bound = (inv * np.log(c)
                 - inv * R * epsilon_ls * np.exp(epsilon_p) / (c * (1.0 - gamma))
                 - epsilon_p)

    finite = _as_table(system, density.grid)
    if finite is not None:
        P_table = density.values.reshape(density.grid.n_states,
                                         density.grid.n_actions)
        from .systems import _node_index
        start = int(_node_index(density.grid.state_lo,
                                density.grid.state_spacing(),
                                density.grid.state_counts,
                                np.atleast_2d(rollout.states[0]))[0])
        best = _finite_best_log_density(finite, P_table, start, n_steps - 1)
    else:
        observed = np.asarray(rollout.densities, dtype=float)
        with np.errstate(divide="ignore"):
            best = np.where(observed > 0, np.log(np.where(observed > 0, observed, 1.0)),
                            -np.inf)
        if ldm is not None:
            best = np.maximum(best, _greedy_log_density(
                rollout.states[0], ldm, density, system, n_steps))

    deficits = bound - best
    lhs = float(deficits.max())
    inputs = {"c": c, "gamma": gamma, "R": R, "epsilon_ls": epsilon_ls,
              "epsilon_p": epsilon_p}
    if gamma == 1.0:
        inputs.update({"k_fin": k_fin, "eps_fin": eps_fin})
    return BoundAudit("rollout-guarantee", lhs, 0.0, inputs,
                      extra={"per_step_bound": bound.tolist(),
                             "per_step_best_log_density": best.tolist()})


def _as_table(system, grid) -> TableSystem | None:
    if isinstance(system, TableSystem):
        return system
    if isinstance(system, ChainSystem):
        return snap_to_table(system, grid)
    return None


def _greedy_log_density(start_state, ldm: ScalarField, density: ScalarField,
                        system, n_steps: int) -> np.ndarray:
    """log P along the greedy minimum-LDM trajectory from the start state."""
    grid = ldm.grid
    action_nodes = grid.action_coords()
    state = np.atleast_1d(np.asarray(start_state, dtype=float))
    out = np.empty(n_steps)
    for t in range(n_steps):
        g_vals = field_lookup(ldm, np.tile(state, (len(action_nodes), 1)),
                              action_nodes)
        k = int(np.argmin(g_vals))
        p = field_lookup(density, state, action_nodes[k])
        out[t] = np.log(p) if p > 0 else -np.inf
        state = system.step(state[None, :], action_nodes[k][None, :])[0]
    return out


def audit_reward_bound(planned_rewards, realized_rewards, constants: dict) -> BoundAudit:
    """Audit the planning-reward degradation bound.

    constants: c, gamma, T, R, epsilon_ls, epsilon_p, epsilon_r.
    Marked not-applicable when c falls below its feasibility threshold.
    """
    c = constants["c"]
    gamma = constants["gamma"]
    T = int(constants["T"])
    R = constants["R"]
    eps_ls = constants["epsilon_ls"]
    eps_p = constants.get("epsilon_p", 0.0)
    eps_r = constants["epsilon_r"]
    planned = np.asarray(planned_rewards, dtype=float)[:T]
    realized = np.asarray(realized_rewards, dtype=float)[:T]
    disc = gamma ** np.arange(len(planned))
    lhs = float(abs(np.sum(disc * (planned - realized))))

    inputs = dict(constants)
    if T == 0:
        return BoundAudit("reward-degradation", 0.0, 0.0, inputs)
    if gamma >= 1.0:
        raise AnalysisError("the reward bound requires gamma < 1")
    if eps_r <= 0:
        # reward error scale of zero: the model-error term vanishes and the
        # planned and realized sums must agree exactly
        return BoundAudit("reward-degradation", lhs, 0.0, inputs,
                          extra={"note": "epsilon_r = 0: exact-model case"})
    log_er = np.log(eps_r)
    denom = (1.0 - gamma ** (T - 1) * (eps_p + 2.0 * log_er)) * (1.0 - gamma)
    c_min = ((1.0 - gamma) + R * eps_ls * np.exp(eps_p)) / denom if denom > 0 \
        else np.inf
    applicable = c >= c_min
    rhs = ((1.0 + eps_p + 2.0 * log_er) * (1.0 - gamma ** T) / (1.0 - gamma)
           + T * (np.log(1.0 / c) + R * eps_ls * np.exp(eps_p) / (c * (1.0 - gamma))))
    return BoundAudit("reward-degradation", lhs, float(rhs), inputs,
                      applicable=bool(applicable),
                      extra={"c_feasibility_min": float(c_min)})
