"""Maximal-LDM computation.

The backup operator is T G(s,a) = max{E(s,a), min_a' gamma * G(f(s,a), a')}
with the min taken over the discrete action grid and G read off-grid by
multilinear interpolation. Iterating from G0 = E yields the maximal LDM
(exactly, for finite systems with gamma = 1).

Sweeps are Jacobi (every cell reads the previous iterate), so parallel
evaluation is bit-identical to sequential evaluation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import numba
from numba import njit, prange, set_num_threads, get_num_threads

from .core import (GridError, ScalarField, StateActionGrid, TransitionDataset,
                   interp_weights)
from .systems import TableSystem


class SolverError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 1.0
    tolerance: float = 1e-9
    max_sweeps: int = 500
    interpolation: str = "multilinear"
    record_history: bool = True
    jobs: int | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.tolerance <= 0 or self.max_sweeps < 1:
            raise ValueError("tolerance must be > 0 and max_sweeps >= 1")
        if self.interpolation not in ("multilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "tolerance": self.tolerance,
                "max_sweeps": self.max_sweeps, "interpolation": self.interpolation,
                "record_history": self.record_history, "jobs": self.jobs}


@dataclass
class SolveReport:
    sweeps: int
    final_residual: float
    residuals: list = field(default_factory=list)
    monotone: bool = True
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {"sweeps": self.sweeps, "final_residual": self.final_residual,
                "residuals": self.residuals, "monotone": self.monotone,
                "wall_time": self.wall_time}


# -- backup stencil ----------------------------------------------------------

@dataclass(frozen=True)
class BackupStencil:
    """Per-cell interpolation stencil at the successor state f(s, a)."""

    grid: StateActionGrid
    corners: np.ndarray   # (n_cells, C) flat state-node indices
    weights: np.ndarray   # (n_cells, C)
    oob: np.ndarray       # (n_cells,) successor leaves the state box


def build_stencil(grid: StateActionGrid, system,
                  interpolation: str = "multilinear") -> BackupStencil:
    states, actions = grid.cell_coords()
    nxt = system.step(states, actions)
    corners, weights, in_domain = interp_weights(
        grid.state_lo, grid.state_spacing(), grid.state_counts, nxt,
        mode=interpolation)
    weights = np.where(in_domain[:, None], weights, 0.0)
    return BackupStencil(grid=grid, corners=np.ascontiguousarray(corners),
                         weights=np.ascontiguousarray(weights),
                         oob=~in_domain)


@njit(parallel=True, cache=True)
def _sweep_kernel(Gsa, Gflat, corners, weights, oob, E, gamma, sentinel,
                  state_changed, out):
    # Cells whose stencil states did not change last sweep keep their value;
    # this is exact, not approximate (their inputs are bit-identical).
    n_cells = E.shape[0]
    n_actions = Gsa.shape[1]
    n_corners = corners.shape[1]
    for i in prange(n_cells):
        e = E[i]
        if oob[i]:
            g = gamma * sentinel
            v = e if e >= g else g
            out[i] = sentinel if v > sentinel else v
            continue
        active = False
        for c in range(n_corners):
            if state_changed[corners[i, c]]:
                active = True
                break
        if not active:
            out[i] = Gflat[i]
            continue
        best = np.inf
        if n_corners == 4:
            w0 = weights[i, 0]; w1 = weights[i, 1]
            w2 = weights[i, 2]; w3 = weights[i, 3]
            r0 = Gsa[corners[i, 0]]; r1 = Gsa[corners[i, 1]]
            r2 = Gsa[corners[i, 2]]; r3 = Gsa[corners[i, 3]]
            for k in range(n_actions):
                v = w0 * r0[k] + w1 * r1[k] + w2 * r2[k] + w3 * r3[k]
                if v < best:
                    best = v
        elif n_corners == 2:
            w0 = weights[i, 0]; w1 = weights[i, 1]
            r0 = Gsa[corners[i, 0]]; r1 = Gsa[corners[i, 1]]
            for k in range(n_actions):
                v = w0 * r0[k] + w1 * r1[k]
                if v < best:
                    best = v
        elif n_corners == 1:
            r0 = Gsa[corners[i, 0]]
            w0 = weights[i, 0]
            for k in range(n_actions):
                v = w0 * r0[k]
                if v < best:
                    best = v
        else:
            for k in range(n_actions):
                v = weights[i, 0] * Gsa[corners[i, 0], k]
                for c in range(1, n_corners):
                    v += weights[i, c] * Gsa[corners[i, c], k]
                if v < best:
                    best = v
        g = gamma * best
        v = e if e >= g else g
        # interpolation roundoff can overshoot the sentinel by an ulp
        out[i] = sentinel if v > sentinel else v


def _sweep(G_values: np.ndarray, E_values: np.ndarray, stencil: BackupStencil,
           gamma: float, sentinel: float,
           state_changed: np.ndarray | None = None) -> np.ndarray:
    grid = stencil.grid
    Gsa = np.ascontiguousarray(G_values.reshape(grid.n_states, grid.n_actions))
    if state_changed is None:
        state_changed = np.ones(grid.n_states, dtype=np.bool_)
    out = np.empty_like(E_values)
    _sweep_kernel(Gsa, Gsa.reshape(-1), stencil.corners, stencil.weights,
                  stencil.oob, E_values, gamma, sentinel, state_changed, out)
    return out


def ldm_backup(G: ScalarField, E: ScalarField, system, gamma: float = 1.0,
               interpolation: str = "multilinear") -> ScalarField:
    """One full Jacobi sweep of the LDM backup operator."""
    if G.grid is not E.grid and G.grid.to_dict() != E.grid.to_dict():
        raise GridError("G and E must share a grid")
    if E.role != "energy":
        raise GridError("E must be an energy-role field")
    stencil = build_stencil(E.grid, system, interpolation)
    out = _sweep(G.values, E.values, stencil, gamma, E.sentinel)
    return ScalarField(E.grid, out, role="ldm", sentinel=E.sentinel)


def solve_maximal_ldm(E: ScalarField, system,
                      config: SolverConfig = SolverConfig()) -> tuple:
    """Iterate the LDM backup from G0 = E until the sup-norm residual
    drops below tolerance. Returns (ldm field, SolveReport)."""
    if E.role != "energy":
        raise GridError("solve_maximal_ldm expects an energy-role field")
    prev_threads = get_num_threads()
    if config.jobs:
        # cap at the machine's thread budget; more jobs than cores is a no-op
        set_num_threads(max(1, min(config.jobs, numba.config.NUMBA_NUM_THREADS)))
    try:
        t0 = time.perf_counter()
        stencil = build_stencil(E.grid, system, config.interpolation)
        G = E.values.copy()
        residuals = []
        monotone = True
        converged = False
        sweeps = 0
        n_states, n_actions = E.grid.n_states, E.grid.n_actions
        state_changed = np.ones(n_states, dtype=np.bool_)
        for sweeps in range(1, config.max_sweeps + 1):
            out = _sweep(G, E.values, stencil, config.gamma, E.sentinel,
                         state_changed)
            residual = float(np.max(np.abs(out - G)))
            monotone = monotone and bool(np.all(out >= G))
            if config.record_history:
                residuals.append(residual)
            state_changed = (out != G).reshape(n_states, n_actions).any(axis=1)
            G = out
            if residual < config.tolerance:
                converged = True
                break
        if not converged:
            raise SolverError(
                f"no convergence after {config.max_sweeps} sweeps "
                f"(residual {residuals[-1] if residuals else float('nan')})",
                residuals=residuals)
        report = SolveReport(sweeps=sweeps, final_residual=residuals[-1] if residuals
                             else 0.0, residuals=residuals, monotone=monotone,
                             wall_time=time.perf_counter() - t0)
        return ScalarField(E.grid, G, role="ldm", sentinel=E.sentinel), report
    finally:
        set_num_threads(prev_threads)


def min_continuation(field_: ScalarField, system,
                     interpolation: str = "multilinear") -> np.ndarray:
    """min_a' field(f(s,a), a') per cell; sentinel where f(s,a) leaves the box.

    Pure-numpy companion to the sweep kernel, used by the verifiers.
    """
    grid = field_.grid
    stencil = build_stencil(grid, system, interpolation)
    mat = field_.as_matrix()
    best = np.full(grid.n_cells, np.inf)
    for k in range(grid.n_actions):
        vals = (stencil.weights * mat[stencil.corners, k]).sum(axis=1)
        best = np.minimum(best, vals)
    best[stencil.oob] = field_.sentinel
    return best


# -- brute-force oracle ------------------------------------------------------

class BruteForceLdm:
    """Finite-horizon minimax-over-action-sequences oracle on a finite system.

    Evaluates min over action sequences of length T of max_t gamma^t E(s_t, a_t)
    by recursive enumeration of the action tree with memoization on
    (state, action, remaining depth).
    """

    def __init__(self, system: TableSystem, E_table: np.ndarray, gamma: float,
                 sentinel: float, cap: int = 5_000_000):
        self.next_index = [list(map(int, row)) for row in system.next_index]
        self.E = [list(map(float, row)) for row in np.asarray(E_table, dtype=float)]
        self.n_states = len(self.E)
        self.n_actions = len(self.E[0])
        self.gamma = float(gamma)
        self.sentinel = float(sentinel)
        self.cap = cap
        self._memo = {}

    def value(self, s: int, a: int, depth: int) -> float:
        key = (s, a, depth)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        e = self.E[s][a]
        if depth == 0:
            result = e
        else:
            ns = self.next_index[s][a]
            if ns < 0:
                cont = self.sentinel
            else:
                cont = min(self.value(ns, ap, depth - 1)
                           for ap in range(self.n_actions))
            g = self.gamma * cont
            result = e if e >= g else g
        self._memo[key] = result
        return result

    def table_at(self, horizon: int) -> np.ndarray:
        if self.n_states * self.n_actions * (horizon + 1) > self.cap:
            raise SolverError(
                f"brute-force table of {self.n_states}x{self.n_actions} cells at "
                f"horizon {horizon} exceeds the cap {self.cap}")
        out = np.empty((self.n_states, self.n_actions))
        for s in range(self.n_states):
            for a in range(self.n_actions):
                out[s, a] = self.value(s, a, horizon)
        return out


def brute_force_ldm(system: TableSystem, E_table: np.ndarray, horizon: int,
                    gamma: float = 1.0, sentinel: float | None = None,
                    cap: int = 5_000_000) -> np.ndarray:
    """G'_T table by exhaustive enumeration; equals the T-sweep iterate for
    gamma = 1 on finite systems."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    E_table = np.asarray(E_table, dtype=float)
    if sentinel is None:
        sentinel = float(E_table.max())
    return BruteForceLdm(system, E_table, gamma, sentinel, cap).table_at(horizon)


def brute_force_ldm_converged(system: TableSystem, E_table: np.ndarray,
                              gamma: float = 1.0, sentinel: float | None = None,
                              atol: float = 0.0, max_horizon: int = 10000,
                              cap: int = 50_000_000) -> tuple:
    """Run the oracle to stationarity; returns (table, horizon)."""
    E_table = np.asarray(E_table, dtype=float)
    if sentinel is None:
        sentinel = float(E_table.max())
    bf = BruteForceLdm(system, E_table, gamma, sentinel, cap)
    prev = bf.table_at(0)
    for T in range(1, max_horizon + 1):
        cur = bf.table_at(T)
        if np.max(np.abs(cur - prev)) <= atol:
            return cur, T
        prev = cur
    raise SolverError(f"oracle not stationary after horizon {max_horizon}")


# -- fitted iteration --------------------------------------------------------

@dataclass(frozen=True)
class RegressorConfig:
    basis: str = "rbf"          # rbf | onehot
    n_centers: int = 400
    length_scale: float = 1.5   # in units of the center-lattice spacing
    ridge: float = 1e-8

    def to_dict(self) -> dict:
        return {"basis": self.basis, "n_centers": self.n_centers,
                "length_scale": self.length_scale, "ridge": self.ridge}


class _FeatureMap:
    def __init__(self, grid: StateActionGrid, config: RegressorConfig):
        self.grid = grid
        self.config = config
        self.lo = np.concatenate([grid.state_lo, grid.action_lo])
        self.hi = np.concatenate([grid.state_hi, grid.action_hi])
        self.span = self.hi - self.lo
        d = grid.state_dim + grid.action_dim
        if config.basis == "rbf":
            per_dim = max(2, round(config.n_centers ** (1.0 / d)))
            axes = [np.linspace(0.0, 1.0, per_dim) for _ in range(d)]
            mesh = np.meshgrid(*axes, indexing="ij")
            self.centers = np.stack([m.reshape(-1) for m in mesh], axis=1)
            self.scale = config.length_scale / (per_dim - 1)
        elif config.basis == "onehot":
            self.centers = None
        else:
            raise ValueError(f"unknown basis {config.basis!r}")

    @property
    def n_features(self) -> int:
        if self.config.basis == "onehot":
            return self.grid.n_cells
        d = self.lo.size
        return self.centers.shape[0] + d + 1

    def __call__(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        z = (np.concatenate([states, actions], axis=1) - self.lo) / self.span
        if self.config.basis == "onehot":
            from .core import coords_to_cell
            feats = np.zeros((z.shape[0], self.grid.n_cells))
            for i in range(z.shape[0]):
                feats[i, coords_to_cell(self.grid, states[i], actions[i])] = 1.0
            return feats
        sq = ((z[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        rbf = np.exp(-0.5 * sq / self.scale ** 2)
        return np.concatenate([rbf, z, np.ones((z.shape[0], 1))], axis=1)


class FittedLdm:
    """Least-squares LDM iterate: evaluator over arbitrary (s, a)."""

    def __init__(self, feature_map: _FeatureMap, coefs: np.ndarray):
        self.feature_map = feature_map
        self.coefs = coefs

    def __call__(self, states, actions) -> np.ndarray:
        return self.feature_map(states, actions) @ self.coefs


def _ridge_fit(feature_map: _FeatureMap, X_states, X_actions, y,
               ridge: float) -> FittedLdm:
    Phi = feature_map(X_states, X_actions)
    A = Phi.T @ Phi + ridge * np.eye(Phi.shape[1])
    try:
        coefs = np.linalg.solve(A, Phi.T @ y)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"singular normal equations despite ridge: {exc}") from exc
    return FittedLdm(feature_map, coefs)


def backup_targets(G_eval, E_values: np.ndarray, next_states: np.ndarray,
                   grid: StateActionGrid, gamma: float,
                   sentinel: float) -> np.ndarray:
    """T G at sampled transitions: max{E, gamma * min_a' G(s', a')}."""
    action_nodes = grid.action_coords()
    n = next_states.shape[0]
    inside = np.all((next_states >= grid.state_lo)
                    & (next_states <= grid.state_hi), axis=1)
    best = np.full(n, sentinel)
    if inside.any():
        sub = next_states[inside]
        sub_best = np.full(len(sub), np.inf)
        for a in action_nodes:
            vals = G_eval(sub, np.tile(a, (len(sub), 1)))
            sub_best = np.minimum(sub_best, vals)
        best[inside] = sub_best
    return np.maximum(E_values, gamma * best)


@dataclass
class FittedLdmRun:
    iterates: list          # evaluators G_0 .. G_K (G_0 is E itself)
    losses: list            # per-iteration {"rmse", "mean_abs"} on the dataset
    epsilon_ls: float       # max over iterations of the fit RMSE
    config: RegressorConfig
    gamma: float

    @property
    def final(self):
        return self.iterates[-1]


def fitted_ldm_iteration(dataset: TransitionDataset, E_eval, grid: StateActionGrid,
                         config: RegressorConfig, K: int, gamma: float,
                         sentinel: float) -> FittedLdmRun:
    """Fitted LDM iteration: ridge least squares onto backup targets built
    from the dataset's sampled next states."""
    feature_map = _FeatureMap(grid, config)
    s, a, sp = dataset.states, dataset.actions, dataset.next_states
    E_data = E_eval(s, a)
    if K == 0:
        fit = _ridge_fit(feature_map, s, a, E_data, config.ridge)
        resid = fit(s, a) - E_data
        rmse = float(np.sqrt(np.mean(resid ** 2)))
        return FittedLdmRun([fit], [{"rmse": rmse,
                                     "mean_abs": float(np.mean(np.abs(resid)))}],
                            rmse, config, gamma)
    iterates = [E_eval]
    losses = []
    prev = E_eval
    for _ in range(K):
        targets = backup_targets(prev, E_data, sp, grid, gamma, sentinel)
        fit = _ridge_fit(feature_map, s, a, targets, config.ridge)
        resid = fit(s, a) - targets
        losses.append({"rmse": float(np.sqrt(np.mean(resid ** 2))),
                       "mean_abs": float(np.mean(np.abs(resid)))})
        iterates.append(fit)
        prev = fit
    eps_ls = max(l["rmse"] for l in losses)
    return FittedLdmRun(iterates, losses, eps_ls, config, gamma)


# -- sampled expected backup (aliased observations) --------------------------

def sampled_expected_backup(G_eval, E_eval, dataset: TransitionDataset,
                            grid: StateActionGrid, gamma: float,
                            sentinel: float) -> np.ndarray:
    """Per-record targets averaging the backup over every next observation
    recorded for the same (o, a) pair."""
    s, a, sp = dataset.states, dataset.actions, dataset.next_states
    E_data = E_eval(s, a)
    raw = backup_targets(G_eval, E_data, sp, grid, gamma, sentinel)
    keys = {}
    groups = []
    assignment = np.empty(len(dataset), dtype=np.int64)
    for i in range(len(dataset)):
        key = (s[i].tobytes(), a[i].tobytes())
        if key not in keys:
            keys[key] = len(groups)
            groups.append([])
        gi = keys[key]
        groups[gi].append(i)
        assignment[i] = gi
    means = np.array([np.mean(raw[idx]) for idx in groups])
    return means[assignment]


# -- LDM axiom verification --------------------------------------------------

@dataclass
class LdmConditionReport:
    condition1_violations: np.ndarray
    condition2_violations: np.ndarray
    worst_slack1: float
    worst_slack2: float

    @property
    def ok(self) -> bool:
        return (self.condition1_violations.size == 0
                and self.condition2_violations.size == 0)

    def to_dict(self) -> dict:
        return {"condition1_violations": self.condition1_violations.tolist(),
                "condition2_violations": self.condition2_violations.tolist(),
                "worst_slack1": self.worst_slack1,
                "worst_slack2": self.worst_slack2}


def verify_ldm_conditions(G: ScalarField, E: ScalarField, system,
                          slack: float = 1e-8,
                          interpolation: str = "multilinear") -> LdmConditionReport:
    """Check Lyapunov-density conditions: (1) some action keeps the value
    non-increasing across the transition, (2) G dominates E pointwise."""
    if G.grid.to_dict() != E.grid.to_dict():
        raise GridError("G and E must share a grid")
    cont = min_continuation(G, system, interpolation)
    deficit1 = cont - G.values           # > slack means condition 1 violated
    viol1 = np.flatnonzero(deficit1 > slack)
    deficit2 = E.values - G.values
    viol2 = np.flatnonzero(deficit2 > slack)
    return LdmConditionReport(
        condition1_violations=viol1, condition2_violations=viol2,
        worst_slack1=float(deficit1.max()) if deficit1.size else 0.0,
        worst_slack2=float(deficit2.max()) if deficit2.size else 0.0)
