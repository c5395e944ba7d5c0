"""Render level-set panels, phase portraits, and threshold-sweep curves."""

from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .io import FigureError, load_field, load_rollout, load_sweep

KIND_COLORS = {"ldm": "tab:blue", "density": "tab:orange", "none": "tab:gray"}


def default_thresholds(field) -> list:
    finite = field.finite_values()
    return [float(np.percentile(finite, p)) for p in (10, 30, 50, 70, 90)]


def _panel(ax, field, reduced, axis_label, title, thresholds=None):
    if field.state_dim == 1:
        x = field.state_axis(0)
        ax.plot(x, reduced, color="black")
        if thresholds:
            for thr in thresholds:
                ax.axhline(thr, lw=0.8, ls="--", color="tab:red")
        ax.set_xlabel(axis_label)
    elif field.state_dim == 2:
        x, y = field.state_axis(0), field.state_axis(1)
        mesh = ax.pcolormesh(x, y, reduced.T, shading="auto", cmap="viridis")
        plt.colorbar(mesh, ax=ax, shrink=0.85)
        if thresholds:
            cs = ax.contour(x, y, reduced.T, levels=sorted(set(thresholds)),
                            colors="white", linewidths=0.9)
            ax.clabel(cs, fontsize=7, fmt="%.2f")
        ax.set_xlabel("state 0")
        ax.set_ylabel("state 1")
        ax.set_aspect("equal")
    else:
        raise FigureError(f"cannot draw {field.state_dim}-D state panels")
    ax.set_title(title)


def render_level_sets(in_dir, out_file, thresholds=None) -> Path:
    """Side-by-side density and solved-field panels with labeled contours.

    State-action fields are reduced to state space by the sum over actions
    (density: marginal mass) and the min over actions (solved field).
    """
    in_dir = Path(in_dir)
    dens = load_field(in_dir / "density.csv")
    ldm = load_field(in_dir / "ldm.csv")
    if thresholds is None:
        thresholds = default_thresholds(ldm)
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5))
    _panel(axes[0], dens, dens.sum_over_actions(),
           "state", "data density (mass summed over actions)")
    reduced = ldm.min_over_actions()
    # mask the sentinel plateau so the colormap resolves the finite range
    if ldm.sentinel is not None and ldm.state_dim == 2:
        reduced = np.where(reduced >= ldm.sentinel - 1e-9, np.nan, reduced)
    _panel(axes[1], ldm, reduced, "state",
           "solved field (min over actions), dashed/white = thresholds",
           thresholds)
    fig.tight_layout()
    fig.savefig(out_file, dpi=150)
    plt.close(fig)
    return Path(out_file)


def render_phase_portrait(in_dir, out_file, thresholds=None) -> Path:
    """Level-set background with the executed rollout overlaid."""
    in_dir = Path(in_dir)
    ldm = load_field(in_dir / "ldm.csv")
    roll = load_rollout(in_dir / "rollout.csv")
    states = roll["states"]
    fig, ax = plt.subplots(figsize=(6, 5))
    if ldm.state_dim == 2:
        if thresholds is None:
            thresholds = default_thresholds(ldm)
        reduced = ldm.min_over_actions()
        if ldm.sentinel is not None:
            reduced = np.where(reduced >= ldm.sentinel - 1e-9, np.nan, reduced)
        _panel(ax, ldm, reduced, "state", "rollout over solved-field level sets",
               thresholds)
        ax.plot(states[:, 0], states[:, 1], "-o", ms=3, color="tab:red",
                label="executed trajectory")
        ax.plot(states[0, 0], states[0, 1], "s", ms=8, color="tab:green",
                label="start")
        ax.legend(loc="best", fontsize=8)
    else:
        ax.plot(roll["step"], states[:, 0], "-o", ms=3, color="tab:red",
                label="state")
        ax2 = ax.twinx()
        ax2.plot(roll["step"], roll["density"], "-", color="tab:blue",
                 label="executed-cell mass")
        ax2.set_ylabel("density mass", color="tab:blue")
        ax.set_xlabel("step")
        ax.set_ylabel("state", color="tab:red")
        ax.set_title("rollout trace")
    fig.tight_layout()
    fig.savefig(out_file, dpi=150)
    plt.close(fig)
    return Path(out_file)


def render_sweep(in_dir, out_file) -> Path:
    """Median curve with a 25/75 band per constraint kind, reward and
    failure-rate panels. Single-seed tables render the line only and warn."""
    in_dir = Path(in_dir)
    rows = load_sweep(in_dir / "sweep.csv")
    kinds = sorted({r["kind"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for kind in kinds:
        sub = [r for r in rows if r["kind"] == kind]
        pcts = sorted({r["percentile"] for r in sub})
        n_seeds = len({r["seed"] for r in sub})
        if n_seeds < 2:
            warnings.warn(f"kind {kind!r} has a single seed; "
                          "rendering the median line without a band")
        for ax, key in ((axes[0], "mean_reward"), (axes[1], "failure_rate")):
            med, q25, q75 = [], [], []
            for pct in pcts:
                vals = [r[key] for r in sub if r["percentile"] == pct]
                med.append(np.median(vals))
                q25.append(np.percentile(vals, 25))
                q75.append(np.percentile(vals, 75))
            color = KIND_COLORS.get(kind)
            ax.plot(pcts, med, "-o", ms=4, color=color, label=f"{kind} (median)")
            if n_seeds >= 2:
                ax.fill_between(pcts, q25, q75, alpha=0.25, color=color,
                                label=f"{kind} (25-75%)")
    axes[0].set_ylabel("mean step reward")
    axes[1].set_ylabel("failure rate")
    for ax in axes:
        ax.set_xlabel("constraint threshold percentile")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_file, dpi=150)
    plt.close(fig)
    return Path(out_file)
