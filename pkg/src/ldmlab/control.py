"""Constrained model-predictive control, rollouts, and threshold sweeps.

MPC maximizes the horizon-H reward over sampled (or exhaustively enumerated)
action sequences subject to a per-step constraint on a scalar field: an LDM
constraint G <= -log(c), a density constraint E <= -log(c), or none. On
infeasibility the controller falls back to the greedy policy on the
constraint's own field.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ScalarField, StateActionGrid, field_lookup


class ControlError(ValueError):
    pass


# -- constraint --------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintSpec:
    kind: str                            # ldm | density | none
    field: ScalarField | None = None     # ldm field or energy field
    threshold: float = np.inf            # -log(c); ignored for kind=none
    percentile: float | None = None      # provenance of the threshold, if any

    def __post_init__(self):
        if self.kind not in ("ldm", "density", "none"):
            raise ControlError(f"unknown constraint kind {self.kind!r}")
        if self.kind != "none" and self.field is None:
            raise ControlError(f"constraint kind {self.kind!r} requires a field")

    def value(self, states, actions) -> np.ndarray:
        if self.kind == "none":
            return np.full(np.atleast_2d(states).shape[0], -np.inf)
        return np.atleast_1d(field_lookup(self.field, states, actions))

    def satisfied(self, states, actions) -> np.ndarray:
        if self.kind == "none":
            return np.ones(np.atleast_2d(states).shape[0], dtype=bool)
        return self.value(states, actions) <= self.threshold

    def describe(self) -> dict:
        return {"kind": self.kind, "threshold": self.threshold,
                "percentile": self.percentile}


def percentile_threshold(values, pct: float) -> float:
    """Linear-interpolation percentile of a value multiset."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ControlError("cannot take a percentile of an empty value set")
    if not 0.0 <= pct <= 100.0:
        raise ControlError(f"percentile must lie in [0, 100], got {pct}")
    return float(np.percentile(values, pct))


# -- planner -----------------------------------------------------------------

@dataclass(frozen=True)
class MpcConfig:
    horizon: int
    n_candidates: int = 1024
    seed: int = 0
    enumerate_exact: bool = False      # all |A|^H node sequences instead of sampling
    enumeration_cap: int = 100_000

    def __post_init__(self):
        if self.horizon < 1 or self.n_candidates < 1:
            raise ControlError("horizon and n_candidates must be positive")

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "n_candidates": self.n_candidates,
                "seed": self.seed, "enumerate_exact": self.enumerate_exact,
                "enumeration_cap": self.enumeration_cap}


def greedy_policy(fld: ScalarField, state) -> np.ndarray:
    """argmin over the discrete action grid; ties go to the lowest index."""
    nodes = fld.grid.action_coords()
    state = np.atleast_1d(np.asarray(state, dtype=float))
    vals = field_lookup(fld, np.tile(state, (len(nodes), 1)), nodes)
    return nodes[int(np.argmin(vals))]


def _candidate_sequences(grid: StateActionGrid, config: MpcConfig, rng) -> np.ndarray:
    H = config.horizon
    ad = grid.action_dim
    if config.enumerate_exact:
        nodes = grid.action_coords()
        n_seq = len(nodes) ** H
        if n_seq > config.enumeration_cap:
            raise ControlError(
                f"{n_seq} action sequences exceed the enumeration cap "
                f"{config.enumeration_cap}")
        idx = np.array(list(itertools.product(range(len(nodes)), repeat=H)),
                       dtype=np.int64)
        return nodes[idx]                       # (n_seq, H, ad), lexicographic
    return rng.uniform(grid.action_lo, grid.action_hi,
                       size=(config.n_candidates, H, ad))


def mpc_step(state, constraint: ConstraintSpec, config: MpcConfig, dynamics,
             grid: StateActionGrid, reward, backup, rng) -> tuple:
    """One planning step: returns (action, diagnostics).

    Feasible sequences satisfy the constraint at every step t = 1..H; the
    winner maximizes the horizon reward sum, ties going to the lowest
    candidate index. With no feasible candidate the backup policy acts and
    the fallback flag is set.
    """
    state = np.atleast_1d(np.asarray(state, dtype=float))
    cand = _candidate_sequences(grid, config, rng)
    n = cand.shape[0]
    s = np.tile(state, (n, 1))
    feasible = np.ones(n, dtype=bool)
    total = np.zeros(n)
    step_rewards = np.zeros((n, config.horizon))
    for t in range(config.horizon):
        a = cand[:, t, :]
        r = np.asarray(reward(s, a), dtype=float)
        step_rewards[:, t] = r
        total += r
        if constraint.kind != "none":
            feasible &= constraint.value(s, a) <= constraint.threshold
        s = dynamics.step(s, a)
    if not feasible.any():
        action = np.atleast_1d(np.asarray(backup(state), dtype=float))
        return action, {"fallback": True, "n_feasible": 0,
                        "planned_reward": None, "planned_step_rewards": None}
    scores = np.where(feasible, total, -np.inf)
    best = int(np.argmax(scores))
    return cand[best, 0, :].copy(), {
        "fallback": False, "n_feasible": int(feasible.sum()),
        "planned_reward": float(total[best]),
        "planned_step_rewards": step_rewards[best].tolist()}


def make_mpc_policy(constraint: ConstraintSpec, config: MpcConfig, dynamics,
                    grid: StateActionGrid, reward, backup=None):
    """Closure policy for the rollout harness; backup defaults to greedy on
    the constraint's own field (or the zero action for kind=none)."""
    rng = np.random.default_rng(config.seed)
    if backup is None:
        if constraint.kind == "none":
            def backup(state):
                return np.zeros(grid.action_dim)
        else:
            def backup(state):
                return greedy_policy(constraint.field, state)
    def policy(state):
        return mpc_step(state, constraint, config, dynamics, grid, reward,
                        backup, rng)
    return policy


# -- rollouts ----------------------------------------------------------------

@dataclass
class RolloutRecord:
    states: list
    actions: list
    rewards: list
    densities: list
    constraint_values: list
    fallbacks: list
    planned_rewards: list
    termination: str          # max-steps | failure | domain-exit

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def failed(self) -> bool:
        return self.termination in ("failure", "domain-exit")

    def to_dict(self) -> dict:
        return {"states": [list(map(float, s)) for s in self.states],
                "actions": [list(map(float, a)) for a in self.actions],
                "rewards": list(self.rewards), "densities": list(self.densities),
                "constraint_values": list(self.constraint_values),
                "fallbacks": list(self.fallbacks),
                "planned_rewards": list(self.planned_rewards),
                "termination": self.termination}


def rollout(system, policy, start_state, n_steps: int, density: ScalarField,
            constraint: ConstraintSpec | None = None,
            failure_state=None, reward=None) -> RolloutRecord:
    """Closed-loop simulation on the true system; planning may have used a
    fitted model. Records the reference density at every executed cell."""
    grid = density.grid
    if reward is None:
        reward = (system.reward if hasattr(system, "reward")
                  else lambda s, a: np.zeros(s.shape[0]))
    state = np.atleast_1d(np.asarray(start_state, dtype=float))
    record = RolloutRecord([state.copy()], [], [], [], [], [], [], "max-steps")
    for _ in range(n_steps):
        if np.any(state < grid.state_lo) or np.any(state > grid.state_hi):
            record.termination = "domain-exit"
            break
        if failure_state is not None and failure_state(state):
            record.termination = "failure"
            break
        action, diag = policy(state)
        action = np.atleast_1d(np.asarray(action, dtype=float))
        record.actions.append(action.copy())
        record.fallbacks.append(bool(diag.get("fallback", False)))
        record.planned_rewards.append(diag.get("planned_reward"))
        record.densities.append(float(field_lookup(density, state, action)))
        if constraint is not None and constraint.kind != "none":
            record.constraint_values.append(
                float(constraint.value(state[None, :], action[None, :])[0]))
        else:
            record.constraint_values.append(float("nan"))
        record.rewards.append(float(np.atleast_1d(
            reward(state[None, :], action[None, :]))[0]))
        state = system.step(state[None, :], action[None, :])[0]
        record.states.append(state.copy())
    return record


# -- tasks and sweeps --------------------------------------------------------

@dataclass
class SweepTask:
    """Everything a threshold sweep needs: fields, dynamics, reward, starts."""

    system: object
    grid: StateActionGrid
    density: ScalarField
    energy: ScalarField
    ldm: ScalarField
    reward: object                      # callable (states, actions) -> rewards
    start_state: object                 # array, or callable(rng) -> array
    n_steps: int
    mpc: MpcConfig
    failure_state: object = None        # callable(state) -> bool, or None
    planning_dynamics: object = None    # defaults to the true system
    value_sample_size: int = 4096
    value_sample_seed: int = 0

    def constraint_field(self, kind: str) -> ScalarField | None:
        return {"ldm": self.ldm, "density": self.energy, "none": None}[kind]

    def sampled_values(self, kind: str) -> np.ndarray:
        """Constraint values on cells drawn from the reference density,
        standing in for the dataset's constraint-value multiset."""
        fld = self.constraint_field(kind)
        if fld is None:
            raise ControlError("kind=none has no constraint values")
        P = self.density.values
        rng = np.random.default_rng(self.value_sample_seed)
        cells = rng.choice(self.grid.n_cells, size=self.value_sample_size,
                           p=P / P.sum())
        return fld.values[cells]

    def start(self, rng) -> np.ndarray:
        if callable(self.start_state):
            return np.atleast_1d(np.asarray(self.start_state(rng), dtype=float))
        return np.atleast_1d(np.asarray(self.start_state, dtype=float))


def run_task_rollout(task: SweepTask, kind: str, threshold: float, seed: int,
                     percentile: float | None = None) -> RolloutRecord:
    constraint = ConstraintSpec(kind, task.constraint_field(kind), threshold,
                                percentile)
    config = MpcConfig(task.mpc.horizon, task.mpc.n_candidates, seed=seed,
                       enumerate_exact=task.mpc.enumerate_exact,
                       enumeration_cap=task.mpc.enumeration_cap)
    dynamics = task.planning_dynamics or task.system
    policy = make_mpc_policy(constraint, config, dynamics, task.grid, task.reward)
    start = task.start(np.random.default_rng(seed))
    return rollout(task.system, policy, start, task.n_steps, task.density,
                   constraint, task.failure_state, reward=task.reward)


def threshold_sweep(task: SweepTask, kinds, percentiles, seeds) -> list:
    """One row per kind x percentile x seed: mean step reward and failure flag."""
    rows = []
    for kind in kinds:
        values = task.sampled_values(kind) if kind != "none" else None
        for pct in percentiles:
            threshold = (percentile_threshold(values, pct) if kind != "none"
                         else np.inf)
            for seed in seeds:
                rec = run_task_rollout(task, kind, threshold, seed, pct)
                mean_reward = float(np.mean(rec.rewards)) if rec.rewards else 0.0
                rows.append({"kind": kind, "percentile": float(pct),
                             "threshold": float(threshold), "seed": int(seed),
                             "mean_reward": mean_reward,
                             "failure_rate": 1.0 if rec.failed else 0.0})
    return rows


def sweep_summary(rows: list) -> list:
    """Median and 25/75 percentiles across seeds per (kind, percentile)."""
    groups = {}
    for row in rows:
        groups.setdefault((row["kind"], row["percentile"]), []).append(row)
    out = []
    for (kind, pct), grp in sorted(groups.items()):
        rewards = np.array([g["mean_reward"] for g in grp])
        failures = np.array([g["failure_rate"] for g in grp])
        out.append({"kind": kind, "percentile": pct,
                    "reward_median": float(np.median(rewards)),
                    "reward_q25": float(np.percentile(rewards, 25)),
                    "reward_q75": float(np.percentile(rewards, 75)),
                    "failure_median": float(np.median(failures)),
                    "failure_q25": float(np.percentile(failures, 25)),
                    "failure_q75": float(np.percentile(failures, 75))})
    return out


# -- exports -----------------------------------------------------------------

def rollout_to_csv(record: RolloutRecord, path) -> None:
    path = Path(path)
    sd = len(record.states[0])
    ad = len(record.actions[0]) if record.actions else 0
    header = (["step"] + [f"s{i}" for i in range(sd)] + [f"a{i}" for i in range(ad)]
              + ["reward", "density", "constraint_value", "fallback"])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(len(record.actions)):
            writer.writerow([t] + [repr(float(x)) for x in record.states[t]]
                            + [repr(float(x)) for x in record.actions[t]]
                            + [repr(record.rewards[t]), repr(record.densities[t]),
                               repr(record.constraint_values[t]),
                               int(record.fallbacks[t])])


def sweep_to_csv(rows: list, path) -> None:
    path = Path(path)
    header = ["kind", "percentile", "threshold", "seed", "mean_reward",
              "failure_rate"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[k] for k in header])
