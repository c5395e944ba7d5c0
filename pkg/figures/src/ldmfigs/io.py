"""Readers for the solver's export formats.

Field exports are `idx,coord...,value` CSVs with a JSON sidecar holding the
grid geometry, the field role, and the sentinel. Rollouts and sweeps are
plain CSV tables.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FigureError(ValueError):
    pass


@dataclass
class FieldExport:
    values: np.ndarray          # flat, C order: state axes then action axes
    role: str
    sentinel: float | None
    state_lo: np.ndarray
    state_hi: np.ndarray
    state_counts: tuple
    action_counts: tuple

    @property
    def state_dim(self) -> int:
        return len(self.state_counts)

    @property
    def n_actions(self) -> int:
        return int(np.prod(self.action_counts)) if self.action_counts else 1

    def state_axis(self, i: int) -> np.ndarray:
        return np.linspace(self.state_lo[i], self.state_hi[i],
                           self.state_counts[i])

    def by_state(self) -> np.ndarray:
        """(n_states, n_actions) view of the flat values."""
        n_states = int(np.prod(self.state_counts))
        return self.values.reshape(n_states, self.n_actions)

    def min_over_actions(self) -> np.ndarray:
        return self.by_state().min(axis=1).reshape(self.state_counts)

    def sum_over_actions(self) -> np.ndarray:
        return self.by_state().sum(axis=1).reshape(self.state_counts)

    def finite_values(self) -> np.ndarray:
        if self.sentinel is None:
            return self.values
        return self.values[self.values < self.sentinel]


def load_field(path) -> FieldExport:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise FigureError(f"missing field export {path} (or its JSON sidecar)")
    try:
        sidecar = json.loads(sidecar_path.read_text())
        grid = sidecar["grid"]
        n_cells = (int(np.prod(grid["state_counts"]))
                   * int(np.prod(grid["action_counts"] or [1])))
        values = np.full(n_cells, np.nan)
        with path.open("r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                if row:
                    values[int(row[0])] = float(row[-1])
    except (KeyError, ValueError, IndexError, json.JSONDecodeError) as exc:
        raise FigureError(f"malformed field export {path}: {exc}") from exc
    if np.any(np.isnan(values)):
        raise FigureError(f"field export {path} is missing cells")
    return FieldExport(values=values, role=sidecar.get("role", "generic"),
                       sentinel=sidecar.get("sentinel"),
                       state_lo=np.asarray(grid["state_lo"], dtype=float),
                       state_hi=np.asarray(grid["state_hi"], dtype=float),
                       state_counts=tuple(grid["state_counts"]),
                       action_counts=tuple(grid["action_counts"]))


def load_rollout(path) -> dict:
    """Columns: step, s*, a*, reward, density, constraint_value, fallback."""
    path = Path(path)
    if not path.exists():
        raise FigureError(f"missing rollout export {path}")
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FigureError(f"empty rollout export {path}") from None
        rows = [row for row in reader if row]
    if not rows:
        raise FigureError(f"rollout export {path} has no steps")
    cols = {name: np.array([float(row[j]) for row in rows])
            for j, name in enumerate(header)}
    state_cols = [h for h in header if h.startswith("s") and h != "step"]
    cols["states"] = np.stack([cols[h] for h in state_cols], axis=1)
    return cols


def load_sweep(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FigureError(f"missing sweep export {path}")
    with path.open("r", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FigureError(f"sweep export {path} has no rows")
    out = []
    try:
        for row in rows:
            out.append({"kind": row["kind"],
                        "percentile": float(row["percentile"]),
                        "threshold": float(row["threshold"]),
                        "seed": int(row["seed"]),
                        "mean_reward": float(row["mean_reward"]),
                        "failure_rate": float(row["failure_rate"])})
    except (KeyError, ValueError) as exc:
        raise FigureError(f"malformed sweep export {path}: {exc}") from exc
    return out
