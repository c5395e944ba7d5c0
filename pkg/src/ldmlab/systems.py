"""Built-in dynamical systems, data-collection policies, and model fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DatasetError, GridError, StateActionGrid, TransitionDataset


class SystemError(ValueError):
    pass


# -- 2D linear spiral --------------------------------------------------------

@dataclass(frozen=True)
class LinearSpiralSystem:
    """Exact discretization of ds/dt = A s + B a with A = [[b, w], [-w, b]].

    Open-loop unstable for beta > 0: trajectories spiral outwards from the
    origin, but the system is stabilizable through the second state channel.
    """

    beta: float
    omega: float
    dt: float
    F: np.ndarray = field(init=False)
    Gmat: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.beta <= 0 or self.omega <= 0 or self.dt <= 0:
            raise SystemError("beta, omega, dt must all be positive")
        b, w, dt = self.beta, self.omega, self.dt
        rot = np.array([[math.cos(w * dt), math.sin(w * dt)],
                        [-math.sin(w * dt), math.cos(w * dt)]])
        F = math.exp(b * dt) * rot
        A = np.array([[b, w], [-w, b]])
        B = np.array([[0.0], [1.0]])
        Gm = np.linalg.solve(A, (F - np.eye(2)) @ B)
        F.setflags(write=False)
        Gm.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "Gmat", Gm)

    state_dim = 2
    action_dim = 1

    def step(self, states, actions) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        a = np.atleast_2d(np.asarray(actions, dtype=float))
        return s @ self.F.T + a @ self.Gmat.T

    def descriptor(self) -> dict:
        return {"kind": "linear-spiral", "beta": self.beta, "omega": self.omega,
                "dt": self.dt}


def build_linear_spiral(beta: float = 0.1, omega: float = 1.0,
                        dt: float = 0.1) -> LinearSpiralSystem:
    return LinearSpiralSystem(beta, omega, dt)


def reference_spiral_grid(state_count: int = 201, action_count: int = 101) -> StateActionGrid:
    """The [-10, 10] x [-10, 10] x [-5, 5] grid, default size (201, 201, 101)."""
    return StateActionGrid([-10.0, -10.0], [10.0, 10.0], (state_count, state_count),
                           [-5.0], [5.0], (action_count,))


# -- integer chain -----------------------------------------------------------

@dataclass(frozen=True)
class ChainSystem:
    """Integer chain f(s, a) = s + a with the horizon-H counterexample density.

    States cover {-H, ..., H+K-1} and actions {-1, ..., K-1}. The density
    table puts mass 1/(2(H+1)) on the left/right corridors and splits
    1/(2(H+1)) across K actions at state H.
    """

    H: int
    K: int
    epsilon: float

    def __post_init__(self):
        if self.H < 1 or self.K < 1 or self.epsilon <= 0:
            raise SystemError("require H >= 1, K >= 1, epsilon > 0")
        if 1.0 / self.K > 2 * (self.H + 1) * self.epsilon:
            raise SystemError(
                f"K={self.K} too small: need 1/K <= 2(H+1)*epsilon = "
                f"{2 * (self.H + 1) * self.epsilon}")

    state_dim = 1
    action_dim = 1

    @property
    def states(self) -> np.ndarray:
        return np.arange(-self.H, self.H + self.K)

    @property
    def actions(self) -> np.ndarray:
        return np.arange(-1, self.K)

    def grid(self) -> StateActionGrid:
        return StateActionGrid([-self.H], [self.H + self.K - 1],
                               (2 * self.H + self.K,),
                               [-1.0], [float(self.K - 1)], (self.K + 1,))

    def density_table(self) -> np.ndarray:
        """P(s, a) over (states, actions); masses sum exactly to 1."""
        H, K = self.H, self.K
        base = 1.0 / (2 * (H + 1))
        P = np.zeros((2 * H + K, K + 1))
        s_idx = {int(s): i for i, s in enumerate(self.states)}
        a_idx = {int(a): i for i, a in enumerate(self.actions)}
        for s in range(-(H - 1), 1):
            P[s_idx[s], a_idx[-1]] = base
        for s in range(0, H):
            P[s_idx[s], a_idx[1]] = base
        P[s_idx[-H], a_idx[0]] = base
        for k in range(K):
            P[s_idx[H], a_idx[k]] = base / K
        return P

    def step(self, states, actions) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        a = np.atleast_2d(np.asarray(actions, dtype=float))
        return s + a

    def reward(self, states, actions) -> np.ndarray:
        return np.atleast_2d(np.asarray(actions, dtype=float))[:, 0]

    def descriptor(self) -> dict:
        return {"kind": "chain", "H": self.H, "K": self.K, "epsilon": self.epsilon}


def build_chain(H: int, K: int, epsilon: float) -> ChainSystem:
    return ChainSystem(H, K, epsilon)


# -- tabular systems ---------------------------------------------------------

@dataclass(frozen=True)
class TableSystem:
    """Finite system given by an explicit next-state index table.

    next_index has shape (n_states, n_actions) with flat state indices, or -1
    where the transition leaves the domain.
    """

    grid: StateActionGrid
    next_index: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.next_index, dtype=np.int64).copy()
        if t.shape != (self.grid.n_states, self.grid.n_actions):
            raise SystemError("next_index shape must be (n_states, n_actions)")
        t.setflags(write=False)
        object.__setattr__(self, "next_index", t)

    @property
    def state_dim(self) -> int:
        return self.grid.state_dim

    @property
    def action_dim(self) -> int:
        return self.grid.action_dim

    def step(self, states, actions) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        a = np.atleast_2d(np.asarray(actions, dtype=float))
        si = _node_index(self.grid.state_lo, self.grid.state_spacing(),
                         self.grid.state_counts, s)
        ai = _node_index(self.grid.action_lo, self.grid.action_spacing(),
                         self.grid.action_counts, a)
        nxt = self.next_index[si, ai]
        coords = self.grid.state_coords()
        out = np.where(nxt[:, None] >= 0, coords[np.maximum(nxt, 0)], np.nan)
        return out

    def descriptor(self) -> dict:
        return {"kind": "table", "grid": self.grid.to_dict(),
                "next_index": self.next_index.tolist()}


def _node_index(lo, spacing, counts, points) -> np.ndarray:
    t = (points - lo) / spacing
    idx = np.rint(t).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= np.array(counts)) \
            or np.any(np.abs(t - idx) > 1e-9):
        raise SystemError("point is not a grid node of the table system")
    return np.ravel_multi_index(tuple(idx.T), counts)


def snap_to_table(system, grid: StateActionGrid) -> TableSystem:
    """Finite approximation of a continuous system: nearest-node dynamics."""
    states, actions = grid.cell_coords()
    nxt = system.step(states, actions)
    t = (nxt - grid.state_lo) / grid.state_spacing()
    idx = np.rint(t).astype(np.int64)
    counts = np.array(grid.state_counts)
    inside = np.all((idx >= 0) & (idx < counts), axis=1)
    idx = np.clip(idx, 0, counts - 1)
    flat = np.ravel_multi_index(tuple(idx.T), grid.state_counts)
    flat = np.where(inside, flat, -1)
    return TableSystem(grid, flat.reshape(grid.n_states, grid.n_actions))


def random_table_system(n_states: int, n_actions: int, seed: int) -> TableSystem:
    """Random finite system on integer grids, for oracle cross-checks."""
    grid = StateActionGrid([0.0], [float(n_states - 1)], (n_states,),
                           [0.0], [float(n_actions - 1)], (n_actions,))
    rng = np.random.default_rng(seed)
    nxt = rng.integers(0, n_states, size=(n_states, n_actions))
    return TableSystem(grid, nxt)


# -- LQR ---------------------------------------------------------------------

@dataclass(frozen=True)
class LqrController:
    gain: np.ndarray
    riccati: np.ndarray
    Q: np.ndarray
    Rcost: np.ndarray

    def __call__(self, states) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        return -(s @ self.gain.T)


def solve_lqr(F, Gmat, Q, Rcost, tol: float = 1e-10,
              max_iter: int = 100000) -> LqrController:
    """Infinite-horizon discrete Riccati fixed point by iteration."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Gmat = np.atleast_2d(np.asarray(Gmat, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Rcost = np.atleast_2d(np.asarray(Rcost, dtype=float))
    eigs = np.linalg.eigvalsh(Q)
    if np.any(eigs < -1e-12) or np.any(np.linalg.eigvalsh(Rcost) <= 0):
        raise SystemError("Q must be PSD and Rcost positive definite")
    P = Q.copy()
    for _ in range(max_iter):
        gain_term = np.linalg.solve(Rcost + Gmat.T @ P @ Gmat, Gmat.T @ P @ F)
        P_next = Q + F.T @ P @ F - F.T @ P @ Gmat @ gain_term
        delta = np.max(np.abs(P_next - P))
        P = P_next
        if not np.isfinite(delta):
            raise SystemError("Riccati iteration diverged")
        if delta < tol:
            break
    else:
        raise SystemError(f"Riccati iteration did not converge below {tol}")
    gain = np.linalg.solve(Rcost + Gmat.T @ P @ Gmat, Gmat.T @ P @ F)
    return LqrController(gain=gain, riccati=P, Q=Q, Rcost=Rcost)


def solve_lqr_for(system: LinearSpiralSystem, Q=None, Rcost=None) -> LqrController:
    Q = np.eye(2) if Q is None else Q
    Rcost = np.array([[1.0]]) if Rcost is None else Rcost
    return solve_lqr(system.F, system.Gmat, Q, Rcost)


# -- data-collection policies ------------------------------------------------

@dataclass(frozen=True)
class GaussianActionPolicy:
    """Actions a ~ N(mean(s), sigma^2), states uniform over the state box."""

    sigma: float
    controller: LqrController | None = None

    @property
    def name(self) -> str:
        return "lqr-mean-gaussian" if self.controller is not None else "zero-mean-gaussian"

    def sample(self, rng, grid: StateActionGrid, n: int) -> tuple:
        states = rng.uniform(grid.state_lo, grid.state_hi, size=(n, grid.state_dim))
        mean = self.controller(states) if self.controller is not None else 0.0
        actions = mean + self.sigma * rng.standard_normal((n, grid.action_dim))
        actions = np.clip(actions, grid.action_lo, grid.action_hi)
        return states, actions

    def descriptor(self) -> dict:
        return {"policy": self.name, "sigma": self.sigma}


@dataclass(frozen=True)
class ToricPolicy:
    """States on a ring |s| ~ N(rho, sigma_r^2), actions ~ N(0, sigma_a^2)."""

    rho: float = 5.0
    sigma_r: float = 1.0
    sigma_a: float = 1.0

    name = "toric"

    def sample(self, rng, grid: StateActionGrid, n: int) -> tuple:
        if grid.state_dim != 2:
            raise SystemError("toric policy requires a 2-D state space")
        states = np.empty((n, 2))
        have = 0
        while have < n:
            m = n - have
            radius = self.rho + self.sigma_r * rng.standard_normal(m)
            angle = rng.uniform(0.0, 2.0 * math.pi, m)
            cand = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
            ok = np.all((cand >= grid.state_lo) & (cand <= grid.state_hi), axis=1)
            keep = cand[ok]
            states[have:have + len(keep)] = keep
            have += len(keep)
        actions = self.sigma_a * rng.standard_normal((n, grid.action_dim))
        actions = np.clip(actions, grid.action_lo, grid.action_hi)
        return states, actions

    def descriptor(self) -> dict:
        return {"policy": self.name, "rho": self.rho, "sigma_r": self.sigma_r,
                "sigma_a": self.sigma_a}


def collect_dataset(system, grid: StateActionGrid, policy, n_samples: int,
                    seed: int) -> TransitionDataset:
    """Sample (s, a, s') transitions; reproducible from the seed."""
    if n_samples < 1:
        raise DatasetError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    states, actions = policy.sample(rng, grid, n_samples)
    next_states = system.step(states, actions)
    meta = dict(policy.descriptor())
    meta.update({"seed": int(seed), "n_samples": int(n_samples)})
    return TransitionDataset(states, actions, next_states, metadata=meta)


# -- dynamics fitting --------------------------------------------------------

@dataclass(frozen=True)
class FittedLinearModel:
    """Least-squares fit of s' = F s + G a."""

    F: np.ndarray
    Gmat: np.ndarray
    rmse: float

    @property
    def state_dim(self) -> int:
        return self.F.shape[0]

    @property
    def action_dim(self) -> int:
        return self.Gmat.shape[1]

    def step(self, states, actions) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        a = np.atleast_2d(np.asarray(actions, dtype=float))
        return s @ self.F.T + a @ self.Gmat.T

    def descriptor(self) -> dict:
        return {"kind": "fitted-linear", "F": self.F.tolist(),
                "Gmat": self.Gmat.tolist(), "rmse": self.rmse}


def fit_linear_dynamics(dataset: TransitionDataset) -> FittedLinearModel:
    """Empirical-risk fit of the one-step map by linear least squares."""
    sd = dataset.states.shape[1]
    ad = dataset.actions.shape[1]
    X = np.concatenate([dataset.states, dataset.actions], axis=1)
    if len(dataset) < sd + ad:
        raise DatasetError(f"need at least {sd + ad} rows, got {len(dataset)}")
    u, sv, vt = np.linalg.svd(X, full_matrices=False)
    rank = int(np.sum(sv > sv[0] * max(X.shape) * np.finfo(float).eps))
    if rank < sd + ad:
        names = [f"s{i}" for i in range(sd)] + [f"a{i}" for i in range(ad)]
        deficient = names[int(np.argmax(np.abs(vt[rank])))]
        raise DatasetError(f"rank-deficient design (rank {rank} < {sd + ad}); "
                           f"dimension {deficient} is not excited by the data")
    theta, *_ = np.linalg.lstsq(X, dataset.next_states, rcond=None)
    F = theta[:sd].T
    Gm = theta[sd:].T
    resid = X @ theta - dataset.next_states
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    return FittedLinearModel(F=F, Gmat=Gm, rmse=rmse)
