"""Density estimation on state-action grids and conversion to energies.

Density fields store per-cell probability mass (summing to 1 over the grid),
which keeps histogram, KDE, analytic, and exact-table densities directly
comparable. Energies are E = -log(P) with a finite sentinel for cells below
the density floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import gaussian_kde

from .core import GridError, ScalarField, StateActionGrid, TransitionDataset
from .systems import ChainSystem, LqrController


class DensityError(ValueError):
    pass


@dataclass(frozen=True)
class DensityConfig:
    estimator: str = "histogram"  # histogram | gaussian-kde | analytic
    bandwidth: object = "scott"   # "scott" or a fixed positive float
    floor: float = 1e-12

    def __post_init__(self):
        if self.estimator not in ("histogram", "gaussian-kde", "analytic"):
            raise DensityError(f"unknown estimator {self.estimator!r}")
        if self.floor <= 0:
            raise DensityError("density floor must be positive")

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "bandwidth": self.bandwidth,
                "floor": self.floor}


def _node_edges(lo: float, spacing: float, count: int) -> np.ndarray:
    nodes = lo + np.arange(count) * spacing
    edges = np.empty(count + 1)
    edges[1:-1] = 0.5 * (nodes[:-1] + nodes[1:])
    edges[0] = nodes[0] - 0.5 * spacing
    edges[-1] = nodes[-1] + 0.5 * spacing
    return edges


def estimate_density(dataset: TransitionDataset, grid: StateActionGrid,
                     config: DensityConfig) -> ScalarField:
    """Histogram or Gaussian-KDE estimate of P(s, a) over the grid cells."""
    if len(dataset) == 0:
        raise DensityError("cannot estimate a density from an empty dataset")
    points = np.concatenate([dataset.states, dataset.actions], axis=1)
    if config.estimator == "histogram":
        lo = np.concatenate([grid.state_lo, grid.action_lo])
        spacing = np.concatenate([grid.state_spacing(), grid.action_spacing()])
        counts = grid.state_counts + grid.action_counts
        edges = [_node_edges(lo[d], spacing[d], counts[d]) for d in range(len(counts))]
        hist, _ = np.histogramdd(points, bins=edges)
        masses = hist.reshape(-1) / len(dataset)
    elif config.estimator == "gaussian-kde":
        bw = config.bandwidth if isinstance(config.bandwidth, (int, float)) else "scott"
        kde = gaussian_kde(points.T, bw_method=bw)
        states, actions = grid.cell_coords()
        cells = np.concatenate([states, actions], axis=1)
        vals = kde(cells.T)
        masses = vals / vals.sum()
    else:
        raise DensityError("use analytic_density() for analytic densities")
    return ScalarField(grid, masses, role="density")


def analytic_density(kind: str, params: dict, grid: StateActionGrid) -> ScalarField:
    """Closed-form density evaluated per cell and normalized to unit mass.

    Kinds: zero-mean-gaussian, lqr-mean-gaussian, toric, chain-table.
    """
    if kind == "chain-table":
        chain: ChainSystem = params["chain"]
        table = chain.density_table()
        if grid.to_dict() != chain.grid().to_dict():
            raise DensityError("grid does not match the chain construction")
        # exact rational masses; no renormalization
        return ScalarField(grid, table.reshape(-1), role="density")
    states, actions = grid.cell_coords()
    if kind == "zero-mean-gaussian":
        sigma = params.get("sigma", 1.0)
        weights = _state_weight(states, params) * _gauss(actions, 0.0, sigma)
    elif kind == "lqr-mean-gaussian":
        sigma = params.get("sigma", 1.0)
        controller: LqrController = params["controller"]
        mean = controller(states)
        weights = _state_weight(states, params) * _gauss(actions, mean, sigma)
    elif kind == "toric":
        rho = params.get("rho", 5.0)
        sigma_r = params.get("sigma_r", 1.0)
        sigma_a = params.get("sigma_a", 1.0)
        radius = np.linalg.norm(states, axis=1)
        weights = (np.exp(-0.5 * ((radius - rho) / sigma_r) ** 2)
                   * _gauss(actions, 0.0, sigma_a))
    else:
        raise DensityError(f"unknown analytic density kind {kind!r}")
    return ScalarField(grid, weights / weights.sum(), role="density")


def _gauss(actions: np.ndarray, mean, sigma: float) -> np.ndarray:
    diff = actions - mean
    return np.exp(-0.5 * np.sum((diff / sigma) ** 2, axis=1))


def _state_weight(states: np.ndarray, params: dict) -> np.ndarray:
    spread = params.get("state_weight", "uniform")
    if spread == "uniform":
        return np.ones(states.shape[0])
    if isinstance(spread, (int, float)):
        return np.exp(-0.5 * np.sum((states / spread) ** 2, axis=1))
    raise DensityError(f"unknown state weight {spread!r}")


def to_energy(density: ScalarField, floor: float = 1e-12) -> ScalarField:
    """E = -log(P) with cells below the floor mapped to a finite sentinel."""
    if density.role != "density":
        raise GridError("to_energy requires a density-role field")
    if floor <= 0:
        raise DensityError("density floor must be positive")
    P = density.values
    live = P >= floor
    if not np.any(live):
        raise DensityError("all cells fall below the density floor")
    energy = np.empty_like(P)
    energy[live] = -np.log(P[live])
    sentinel = float(energy[live].max()) + 100.0
    energy[~live] = sentinel
    return ScalarField(density.grid, energy, role="energy", sentinel=sentinel)
