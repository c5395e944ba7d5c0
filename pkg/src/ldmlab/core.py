"""Grids, scalar fields, and transition datasets shared by all modules.

A :class:`StateActionGrid` discretizes the product of a rectangular state box
and a rectangular action box. Grid nodes include both bounds and are evenly
spaced, so an axis with n nodes has spacing (hi - lo) / (n - 1). Cells are
indexed in C order with state axes first, then action axes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

ROLES = ("density", "energy", "ldm", "generic")


class GridError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def _as_vector(x) -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=float)).copy()
    v.setflags(write=False)
    return v


@dataclass(frozen=True, eq=False)
class StateActionGrid:
    """Rectangular node grid over S x A with flat C-order cell indexing."""

    state_lo: np.ndarray
    state_hi: np.ndarray
    state_counts: tuple
    action_lo: np.ndarray
    action_hi: np.ndarray
    action_counts: tuple

    def __post_init__(self):
        object.__setattr__(self, "state_lo", _as_vector(self.state_lo))
        object.__setattr__(self, "state_hi", _as_vector(self.state_hi))
        object.__setattr__(self, "action_lo", _as_vector(self.action_lo))
        object.__setattr__(self, "action_hi", _as_vector(self.action_hi))
        object.__setattr__(self, "state_counts", tuple(int(c) for c in self.state_counts))
        object.__setattr__(self, "action_counts", tuple(int(c) for c in self.action_counts))
        if len(self.state_lo) != len(self.state_hi) or len(self.state_lo) != len(self.state_counts):
            raise GridError("state bounds/counts dimension mismatch")
        if len(self.action_lo) != len(self.action_hi) or len(self.action_lo) != len(self.action_counts):
            raise GridError("action bounds/counts dimension mismatch")
        if np.any(self.state_hi <= self.state_lo) or np.any(self.action_hi <= self.action_lo):
            raise GridError("grid bounds must satisfy lo < hi componentwise")
        for c in self.state_counts + self.action_counts:
            if c < 2:
                raise GridError("axis node counts must be >= 2")

    def __eq__(self, other) -> bool:
        if not isinstance(other, StateActionGrid):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash((tuple(self.state_lo), tuple(self.state_hi),
                     self.state_counts, tuple(self.action_lo),
                     tuple(self.action_hi), self.action_counts))

    # -- shape helpers -------------------------------------------------------

    @property
    def state_dim(self) -> int:
        return len(self.state_counts)

    @property
    def action_dim(self) -> int:
        return len(self.action_counts)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.state_counts))

    @property
    def n_actions(self) -> int:
        return int(np.prod(self.action_counts)) if self.action_counts else 1

    @property
    def n_cells(self) -> int:
        return self.n_states * self.n_actions

    @property
    def shape(self) -> tuple:
        return self.state_counts + self.action_counts

    def state_spacing(self) -> np.ndarray:
        counts = np.array(self.state_counts, dtype=float)
        return (self.state_hi - self.state_lo) / (counts - 1.0)

    def action_spacing(self) -> np.ndarray:
        counts = np.array(self.action_counts, dtype=float)
        return (self.action_hi - self.action_lo) / (counts - 1.0)

    def state_axes(self) -> list:
        h = self.state_spacing()
        return [self.state_lo[d] + np.arange(self.state_counts[d]) * h[d]
                for d in range(self.state_dim)]

    def action_axes(self) -> list:
        h = self.action_spacing()
        return [self.action_lo[d] + np.arange(self.action_counts[d]) * h[d]
                for d in range(self.action_dim)]

    # -- coordinates ---------------------------------------------------------

    def state_coords(self) -> np.ndarray:
        """All state-node coordinates, shape (n_states, state_dim), C order."""
        mesh = np.meshgrid(*self.state_axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def action_coords(self) -> np.ndarray:
        """All action-node coordinates, shape (n_actions, action_dim), C order."""
        if self.action_dim == 0:
            return np.zeros((1, 0))
        mesh = np.meshgrid(*self.action_axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def cell_coords(self) -> tuple:
        """Coordinates for every cell: (states (n_cells, sd), actions (n_cells, ad))."""
        s = self.state_coords()
        a = self.action_coords()
        states = np.repeat(s, self.n_actions, axis=0)
        actions = np.tile(a, (self.n_states, 1))
        return states, actions

    def to_dict(self) -> dict:
        return {
            "state_lo": self.state_lo.tolist(),
            "state_hi": self.state_hi.tolist(),
            "state_counts": list(self.state_counts),
            "action_lo": self.action_lo.tolist(),
            "action_hi": self.action_hi.tolist(),
            "action_counts": list(self.action_counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateActionGrid":
        return cls(d["state_lo"], d["state_hi"], tuple(d["state_counts"]),
                   d["action_lo"], d["action_hi"], tuple(d["action_counts"]))


def cell_to_coords(grid: StateActionGrid, index: int) -> tuple:
    """Coordinates of a cell node; inverse of :func:`coords_to_cell` on grid points."""
    if not 0 <= index < grid.n_cells:
        raise GridError(f"cell index {index} out of range [0, {grid.n_cells})")
    s_idx, a_idx = divmod(int(index), grid.n_actions)
    s_multi = np.unravel_index(s_idx, grid.state_counts)
    hs = grid.state_spacing()
    state = grid.state_lo + np.array(s_multi) * hs
    if grid.action_dim == 0:
        return state, np.zeros(0)
    a_multi = np.unravel_index(a_idx, grid.action_counts)
    ha = grid.action_spacing()
    action = grid.action_lo + np.array(a_multi) * ha
    return state, action


def coords_to_cell(grid: StateActionGrid, state, action=()) -> int:
    """Flat cell index of the grid node at the given coordinates.

    The point must lie on a grid node (up to a small numerical tolerance).
    """
    state = np.atleast_1d(np.asarray(state, dtype=float))
    action = np.atleast_1d(np.asarray(action, dtype=float))
    hs = grid.state_spacing()
    ts = (state - grid.state_lo) / hs
    si = np.rint(ts).astype(int)
    if np.any(si < 0) or np.any(si >= np.array(grid.state_counts)) \
            or np.any(np.abs(ts - si) > 1e-9):
        raise GridError(f"state {state} is not a grid node")
    s_idx = int(np.ravel_multi_index(tuple(si), grid.state_counts))
    if grid.action_dim == 0:
        return s_idx
    ha = grid.action_spacing()
    ta = (action - grid.action_lo) / ha
    ai = np.rint(ta).astype(int)
    if np.any(ai < 0) or np.any(ai >= np.array(grid.action_counts)) \
            or np.any(np.abs(ta - ai) > 1e-9):
        raise GridError(f"action {action} is not a grid node")
    a_idx = int(np.ravel_multi_index(tuple(ai), grid.action_counts))
    return s_idx * grid.n_actions + a_idx


@dataclass(frozen=True)
class ScalarField:
    """Per-cell scalar values on a grid.

    Roles: "density" (nonnegative cell masses), "energy"/"ldm" (values bounded
    by a finite sentinel standing in for +inf), or "generic".
    """

    grid: StateActionGrid
    values: np.ndarray
    role: str = "generic"
    sentinel: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1).copy()
        if v.size != self.grid.n_cells:
            raise GridError(f"field has {v.size} values, grid has {self.grid.n_cells} cells")
        if self.role not in ROLES:
            raise GridError(f"unknown field role {self.role!r}")
        if self.role == "density":
            if np.any(v < 0):
                raise GridError("density field values must be nonnegative")
        elif self.role in ("energy", "ldm"):
            if self.sentinel is None:
                raise GridError(f"{self.role} field requires a sentinel")
            if np.any(v > self.sentinel):
                raise GridError("energy/ldm values must not exceed the sentinel")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def as_matrix(self) -> np.ndarray:
        """Values reshaped to (n_states, n_actions)."""
        return self.values.reshape(self.grid.n_states, self.grid.n_actions)

    def with_values(self, values, role=None, sentinel=None) -> "ScalarField":
        return ScalarField(self.grid, values,
                           role=role if role is not None else self.role,
                           sentinel=sentinel if sentinel is not None else self.sentinel)

    def min_over_actions(self) -> np.ndarray:
        return self.as_matrix().min(axis=1)


@dataclass(frozen=True)
class SublevelSet:
    """Cells of a field with value <= threshold."""

    field: ScalarField
    threshold: float
    members: np.ndarray  # sorted cell indices

    @property
    def size(self) -> int:
        return int(self.members.size)

    def member_mask(self) -> np.ndarray:
        mask = np.zeros(self.field.grid.n_cells, dtype=bool)
        mask[self.members] = True
        return mask


def sublevel_set(field: ScalarField, threshold: float) -> SublevelSet:
    """Exact cell set {i : values[i] <= threshold}."""
    if field.role not in ("energy", "ldm"):
        raise GridError("sublevel sets are defined for energy/ldm fields")
    members = np.flatnonzero(field.values <= threshold)
    return SublevelSet(field, float(threshold), members)


# -- interpolation -----------------------------------------------------------

def interp_weights(lo: np.ndarray, spacing: np.ndarray, counts: tuple,
                   points: np.ndarray, mode: str = "multilinear") -> tuple:
    """Interpolation stencils for points over one axis group.

    Returns (corners, weights, in_domain): corners (m, C) are flat C-order
    node indices, weights (m, C) sum to 1 for in-domain points, and
    in_domain (m,) marks points inside the closed box. Stencils for points
    outside the box are clamped and should be masked by the caller.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m, d = points.shape
    counts_arr = np.array(counts)
    in_domain = np.all((points >= lo) & (points <= lo + spacing * (counts_arr - 1)), axis=1)
    t = (points - lo) / spacing
    # NaN rows (e.g. transitions that leave a tabular system) are off-domain;
    # give them a valid dummy stencil so the integer cast stays defined
    t = np.where(np.isfinite(t), t, 0.0)
    if mode == "nearest":
        idx = np.clip(np.rint(t).astype(np.int64), 0, counts_arr - 1)
        corners = np.ravel_multi_index(tuple(idx.T), counts).reshape(m, 1)
        return corners.astype(np.int64), np.ones((m, 1)), in_domain
    if mode != "multilinear":
        raise GridError(f"unknown interpolation mode {mode!r}")
    i0 = np.clip(np.floor(t).astype(np.int64), 0, counts_arr - 2)
    frac = t - i0
    n_corners = 1 << d
    corners = np.empty((m, n_corners), dtype=np.int64)
    weights = np.empty((m, n_corners))
    for c in range(n_corners):
        idx = i0.copy()
        w = np.ones(m)
        for axis in range(d):
            if (c >> axis) & 1:
                idx[:, axis] += 1
                w = w * frac[:, axis]
            else:
                w = w * (1.0 - frac[:, axis])
        corners[:, c] = np.ravel_multi_index(tuple(idx.T), counts)
        weights[:, c] = w
    return corners, weights, in_domain


def _off_domain_value(field: ScalarField) -> float:
    if field.role == "density":
        return 0.0
    if field.role in ("energy", "ldm"):
        return field.sentinel
    return np.nan


def field_lookup(field: ScalarField, state, action=(), mode: str = "multilinear"):
    """Interpolated field value at (state, action); accepts batches.

    Off-domain points evaluate to the sentinel (energy/ldm), 0 (density), or
    NaN (generic).
    """
    state = np.asarray(state, dtype=float)
    scalar_input = state.ndim == 1
    state = np.atleast_2d(state)
    action = np.atleast_2d(np.asarray(action, dtype=float))
    if action.size == 0:
        action = np.zeros((state.shape[0], 0))
    if action.shape[0] == 1 and state.shape[0] > 1:
        action = np.repeat(action, state.shape[0], axis=0)
    grid = field.grid
    points = np.concatenate([state, action], axis=1)
    lo = np.concatenate([grid.state_lo, grid.action_lo])
    spacing = np.concatenate([grid.state_spacing(), grid.action_spacing()])
    counts = grid.state_counts + grid.action_counts
    corners, weights, in_domain = interp_weights(lo, spacing, counts, points, mode=mode)
    vals = np.einsum("mc,mc->m", weights, field.values[corners])
    vals = np.where(in_domain, vals, _off_domain_value(field))
    return float(vals[0]) if scalar_input else vals


def state_field_lookup(field: ScalarField, state, mode: str = "multilinear"):
    """Lookup for state-only fields (grids with no action axes)."""
    if field.grid.action_dim != 0:
        raise GridError("state_field_lookup requires a state-only field")
    return field_lookup(field, state, (), mode=mode)


# -- transition datasets -----------------------------------------------------

@dataclass(frozen=True)
class TransitionDataset:
    """(s, a, s') records with a generating-policy descriptor and seed."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=float))
        a = np.atleast_2d(np.asarray(self.actions, dtype=float))
        sp = np.atleast_2d(np.asarray(self.next_states, dtype=float))
        if not (s.shape[0] == a.shape[0] == sp.shape[0]):
            raise DatasetError("states/actions/next_states length mismatch")
        if s.shape[1] != sp.shape[1]:
            raise DatasetError("state and next-state dimension mismatch")
        for arr in (s, a, sp):
            arr.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "next_states", sp)

    def __len__(self) -> int:
        return self.states.shape[0]

    def validate_bounds(self, grid: StateActionGrid) -> None:
        """Reject records whose (s, a) lies outside the declared bounds."""
        bad_s = np.any((self.states < grid.state_lo) | (self.states > grid.state_hi), axis=1)
        bad_a = np.any((self.actions < grid.action_lo) | (self.actions > grid.action_hi), axis=1)
        bad = np.flatnonzero(bad_s | bad_a)
        if bad.size:
            raise DatasetError(
                f"{bad.size} records outside declared bounds (first offending row {bad[0]})")


def dataset_to_csv(dataset: TransitionDataset, path) -> None:
    path = Path(path)
    sd = dataset.states.shape[1]
    ad = dataset.actions.shape[1]
    header = ([f"s{i}" for i in range(sd)] + [f"a{i}" for i in range(ad)]
              + [f"sp{i}" for i in range(sd)])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(dataset)):
            row = (list(dataset.states[i]) + list(dataset.actions[i])
                   + list(dataset.next_states[i]))
            writer.writerow([repr(float(x)) for x in row])


def dataset_from_csv(path, grid: StateActionGrid | None = None,
                     metadata: dict | None = None) -> TransitionDataset:
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        sd = sum(1 for h in header if h.startswith("s") and not h.startswith("sp"))
        ad = sum(1 for h in header if h.startswith("a"))
        rows = [[float(x) for x in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    ds = TransitionDataset(data[:, :sd], data[:, sd:sd + ad], data[:, sd + ad:],
                           metadata=dict(metadata or {}))
    if grid is not None:
        ds.validate_bounds(grid)
    return ds


# -- field export ------------------------------------------------------------

def field_to_csv(fld: ScalarField, path, extra_meta: dict | None = None) -> None:
    """Write `idx,coord...,value` CSV plus a JSON sidecar with grid metadata."""
    path = Path(path)
    grid = fld.grid
    states, actions = grid.cell_coords()
    coords = np.concatenate([states, actions], axis=1)
    header = (["idx"] + [f"s{i}" for i in range(grid.state_dim)]
              + [f"a{i}" for i in range(grid.action_dim)] + ["value"])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(grid.n_cells):
            writer.writerow([i] + [repr(float(x)) for x in coords[i]]
                            + [repr(float(fld.values[i]))])
    sidecar = {"grid": grid.to_dict(), "role": fld.role, "sentinel": fld.sentinel}
    if extra_meta:
        sidecar["meta"] = extra_meta
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def field_from_csv(path) -> ScalarField:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    grid = StateActionGrid.from_dict(sidecar["grid"])
    values = np.empty(grid.n_cells)
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row:
                values[int(row[0])] = float(row[-1])
    return ScalarField(grid, values, role=sidecar["role"], sentinel=sidecar["sentinel"])
