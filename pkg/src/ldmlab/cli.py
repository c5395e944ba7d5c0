"""Command-line pipeline: solve, verify, mpc, sweep, audit, export.

Every run echoes its fully-resolved configuration to config.resolved.json in
the output directory so the exact run can be reproduced from the echo alone.
Exit codes: 0 success, 2 config error, 3 numerical non-convergence,
4 verification failure under --strict.
"""

from __future__ import annotations

import argparse
import json
import sys
import zlib
from pathlib import Path

import numpy as np

from . import analysis, control, density as density_mod, solver, systems
from .core import (ScalarField, StateActionGrid, dataset_to_csv, field_from_csv,
                   field_to_csv, sublevel_set)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


class ConfigError(ValueError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    """Named reproducible RNG stream derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence(
        [seed, zlib.crc32(name.encode())]))


def substream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())])
               .generate_state(1)[0])


# -- config handling ---------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        raise ConfigError("--config PATH is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {p}: line {exc.lineno}, "
                          f"column {exc.colno}: {exc.msg}") from exc


def _require(cfg: dict, key: str, where: str = "config"):
    if key not in cfg:
        raise ConfigError(f"missing field {key!r} in {where}")
    return cfg[key]


def build_system(cfg: dict):
    kind = _require(cfg, "kind", "system")
    if kind == "linear-spiral":
        return systems.build_linear_spiral(cfg.get("beta", 0.1),
                                           cfg.get("omega", 1.0),
                                           cfg.get("dt", 0.1))
    if kind == "chain":
        return systems.build_chain(_require(cfg, "H", "system"),
                                   _require(cfg, "K", "system"),
                                   _require(cfg, "epsilon", "system"))
    if kind == "table":
        grid = StateActionGrid.from_dict(_require(cfg, "grid", "system"))
        return systems.TableSystem(grid, np.array(_require(cfg, "next_index",
                                                           "system")))
    raise ConfigError(f"unknown system kind {kind!r}")


def build_grid(cfg: dict, system) -> StateActionGrid:
    if isinstance(system, systems.ChainSystem):
        return system.grid()
    gcfg = cfg.get("grid", {})
    if "state_lo" in gcfg:
        return StateActionGrid.from_dict(gcfg)
    return systems.reference_spiral_grid(gcfg.get("state_count", 201),
                                         gcfg.get("action_count", 101))


def build_density(cfg: dict, system, grid: StateActionGrid,
                  seed: int) -> ScalarField:
    dcfg = cfg.get("density", {})
    source = dcfg.get("source", "analytic")
    if source == "analytic":
        if isinstance(system, systems.ChainSystem):
            return density_mod.analytic_density("chain-table", {"chain": system},
                                                grid)
        kind = dcfg.get("kind", "zero-mean-gaussian")
        params = {k: v for k, v in dcfg.items() if k not in ("source", "kind",
                                                             "floor", "n_samples")}
        if kind == "lqr-mean-gaussian":
            params["controller"] = systems.solve_lqr_for(system)
        return density_mod.analytic_density(kind, params, grid)
    if source in ("histogram", "gaussian-kde"):
        policy = _build_policy(dcfg, system)
        dataset = systems.collect_dataset(system, grid, policy,
                                          dcfg.get("n_samples", 100000),
                                          substream_seed(seed, "dataset"))
        config = density_mod.DensityConfig(estimator=source,
                                           bandwidth=dcfg.get("bandwidth", "scott"),
                                           floor=dcfg.get("floor", 1e-12))
        return density_mod.estimate_density(dataset, grid, config)
    raise ConfigError(f"unknown density source {source!r}")


def _build_policy(dcfg: dict, system):
    kind = dcfg.get("kind", "zero-mean-gaussian")
    sigma = dcfg.get("sigma", 1.0)
    if kind == "zero-mean-gaussian":
        return systems.GaussianActionPolicy(sigma)
    if kind == "lqr-mean-gaussian":
        return systems.GaussianActionPolicy(sigma, systems.solve_lqr_for(system))
    if kind == "toric":
        return systems.ToricPolicy(dcfg.get("rho", 5.0), dcfg.get("sigma_r", 1.0),
                                   dcfg.get("sigma_a", 1.0))
    raise ConfigError(f"unknown policy kind {kind!r}")


def resolve_config(cfg: dict, args) -> dict:
    resolved = json.loads(json.dumps(cfg))  # deep copy
    resolved.setdefault("seed", 0)
    if args.seed is not None:
        resolved["seed"] = args.seed
    scfg = resolved.setdefault("solver", {})
    scfg.setdefault("gamma", 1.0)
    scfg.setdefault("tolerance", 1e-9)
    scfg.setdefault("max_sweeps", 500)
    scfg.setdefault("interpolation", "multilinear")
    dcfg = resolved.setdefault("density", {})
    dcfg.setdefault("source", "analytic")
    dcfg.setdefault("floor", 1e-12)
    if args.jobs is not None:
        resolved["jobs"] = args.jobs
    if args.out is not None:
        resolved["out"] = str(args.out)
    resolved.setdefault("out", "out")
    return resolved


def _outdir(resolved: dict) -> Path:
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(resolved: dict, out: Path) -> None:
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2,
                                                         sort_keys=True))


def _solver_config(resolved: dict) -> solver.SolverConfig:
    scfg = resolved["solver"]
    try:
        return solver.SolverConfig(gamma=scfg["gamma"],
                                   tolerance=scfg["tolerance"],
                                   max_sweeps=scfg["max_sweeps"],
                                   interpolation=scfg["interpolation"],
                                   jobs=resolved.get("jobs"))
    except ValueError as exc:
        raise ConfigError(f"invalid solver config: {exc}") from exc


# -- pipeline pieces shared by subcommands -----------------------------------

def _solve_pipeline(resolved: dict):
    system = build_system(_require(resolved, "system"))
    grid = build_grid(resolved, system)
    dens = build_density(resolved, system, grid, resolved["seed"])
    energy = density_mod.to_energy(dens, resolved["density"]["floor"])
    config = _solver_config(resolved)
    ldm, report = solver.solve_maximal_ldm(energy, system, config)
    return system, grid, dens, energy, ldm, report


# -- subcommands -------------------------------------------------------------

def cmd_solve(args) -> int:
    resolved = resolve_config(load_config(args.config), args)
    out = _outdir(resolved)
    _echo(resolved, out)
    try:
        system, grid, dens, energy, ldm, report = _solve_pipeline(resolved)
    except solver.SolverError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        (out / "solve_report.json").write_text(json.dumps(
            {"error": str(exc), "residuals": exc.residuals}, indent=2))
        return EXIT_NUMERIC
    field_to_csv(dens, out / "density.csv", {"system": system.descriptor()})
    field_to_csv(energy, out / "energy.csv", {"system": system.descriptor()})
    field_to_csv(ldm, out / "ldm.csv", {"system": system.descriptor(),
                                        "solver": resolved["solver"]})
    (out / "solve_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_verify(args) -> int:
    resolved = resolve_config(load_config(args.config), args)
    out = _outdir(resolved)
    _echo(resolved, out)
    ldm = _load_field(resolved, "ldm")
    energy = _load_field(resolved, "energy")
    if ldm.grid.to_dict() != energy.grid.to_dict():
        print("grid mismatch between ldm and energy fields", file=sys.stderr)
        return EXIT_CONFIG
    system = build_system(_require(resolved, "system"))
    slack = resolved.get("slack", 1e-6)
    conditions = solver.verify_ldm_conditions(ldm, energy, system, slack=slack)
    thresholds = resolved.get("thresholds", [])
    invariance = []
    for threshold in thresholds:
        rep = analysis.verify_invariance(sublevel_set(ldm, threshold), system,
                                         slack=slack)
        invariance.append(rep.to_dict())
    report = {"conditions": conditions.to_dict(),
              "invariance": invariance,
              "ok": conditions.ok and all(not r["violations"] for r in invariance)}
    (out / "verify_report.json").write_text(json.dumps(report, indent=2))
    if args.strict and not report["ok"]:
        return EXIT_VERIFY
    return EXIT_OK


def _load_field(resolved: dict, key: str) -> ScalarField:
    path = Path(_require(resolved, key))
    if not path.exists():
        raise ConfigError(f"missing artifact path for {key!r}: {path}")
    return field_from_csv(path)


def _constraint_from_config(resolved: dict, task: control.SweepTask):
    ccfg = resolved.get("constraint", {"kind": "ldm", "percentile": 90.0})
    kind = ccfg.get("kind", "ldm")
    if kind == "none":
        return control.ConstraintSpec("none"), None
    fld = task.constraint_field(kind)
    if "threshold" in ccfg:
        threshold, pct = float(ccfg["threshold"]), None
    elif "c" in ccfg:
        threshold, pct = float(-np.log(ccfg["c"])), None
    else:
        pct = float(ccfg.get("percentile", 90.0))
        threshold = control.percentile_threshold(task.sampled_values(kind), pct)
    return control.ConstraintSpec(kind, fld, threshold, pct), threshold


def _build_task(resolved: dict, args) -> control.SweepTask:
    system, grid, dens, energy, ldm, _ = _solve_pipeline(resolved)
    mcfg = resolved.get("mpc", {})
    n_nodes = grid.n_actions
    horizon = int(mcfg.get("horizon", 1))
    enumerate_exact = bool(mcfg.get("enumerate_exact",
                                    isinstance(system, systems.ChainSystem)
                                    and n_nodes ** horizon <= 100000))
    mpc = control.MpcConfig(horizon=horizon,
                            n_candidates=int(mcfg.get("n_candidates", 1024)),
                            seed=substream_seed(resolved["seed"], "mpc"),
                            enumerate_exact=enumerate_exact)
    rcfg = resolved.get("rollout", {})
    if isinstance(system, systems.ChainSystem):
        reward = system.reward
        start = np.array(rcfg.get("start_state", [0.0]), dtype=float)
        P_table = dens.as_matrix()
        s_lo, h = grid.state_lo, grid.state_spacing()

        def failure_state(state):
            idx = int(np.rint((state[0] - s_lo[0]) / h[0]))
            if not 0 <= idx < grid.n_states:
                return True
            return not np.any(P_table[idx] > 0)
    else:
        goal = np.array(rcfg.get("goal", [0.0, 0.0]), dtype=float)

        def reward(s, a):
            return -np.linalg.norm(np.atleast_2d(s) - goal, axis=1)
        start = np.array(rcfg.get("start_state", [1.0, 1.0]), dtype=float)
        failure_state = None
    return control.SweepTask(
        system=system, grid=grid, density=dens, energy=energy, ldm=ldm,
        reward=reward, start_state=start,
        n_steps=int(rcfg.get("n_steps", 100)), mpc=mpc,
        failure_state=failure_state,
        value_sample_seed=substream_seed(resolved["seed"], "thresholds"))


def cmd_mpc(args) -> int:
    resolved = resolve_config(load_config(args.config), args)
    out = _outdir(resolved)
    _echo(resolved, out)
    task = _build_task(resolved, args)
    constraint, _ = _constraint_from_config(resolved, task)
    policy = control.make_mpc_policy(constraint, task.mpc, task.system,
                                     task.grid, task.reward)
    record = control.rollout(task.system, policy, task.start(None), task.n_steps,
                             task.density, constraint, task.failure_state,
                             reward=task.reward)
    control.rollout_to_csv(record, out / "rollout.csv")
    (out / "mpc_report.json").write_text(json.dumps(
        {"constraint": constraint.describe(), "termination": record.termination,
         "steps": len(record), "mean_reward": float(np.mean(record.rewards))
         if record.rewards else 0.0,
         "min_density": min(record.densities) if record.densities else None},
        indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    resolved = resolve_config(load_config(args.config), args)
    out = _outdir(resolved)
    _echo(resolved, out)
    task = _build_task(resolved, args)
    wcfg = resolved.get("sweep", {})
    kinds = wcfg.get("kinds", ["ldm", "density", "none"])
    percentiles = wcfg.get("percentiles", [10, 30, 50, 70, 90])
    n_seeds = int(wcfg.get("n_seeds", 5))
    seeds = [substream_seed(resolved["seed"], f"sweep-{i}") for i in range(n_seeds)]
    rows = control.threshold_sweep(task, kinds, percentiles, seeds)
    control.sweep_to_csv(rows, out / "sweep.csv")
    (out / "sweep_summary.json").write_text(
        json.dumps(control.sweep_summary(rows), indent=2))
    return EXIT_OK


def cmd_audit(args) -> int:
    resolved = resolve_config(load_config(args.config), args)
    out = _outdir(resolved)
    _echo(resolved, out)
    task = _build_task(resolved, args)
    system, grid = task.system, task.grid
    gamma = resolved["solver"]["gamma"]
    sentinel = task.energy.sentinel
    audits = []
    finite = (system if isinstance(system, systems.TableSystem)
              else systems.snap_to_table(system, grid))
    E_table = task.energy.as_matrix()
    oracle, horizon = solver.brute_force_ldm_converged(finite, E_table, gamma,
                                                      sentinel)
    iterates = [solver.brute_force_ldm(finite, E_table, t, gamma, sentinel)
                .reshape(-1) for t in range(horizon + 1)]
    rec = analysis.compute_recoverability(task.density, system)
    audits.append(analysis.audit_fqi_bound(
        iterates, oracle.reshape(-1), task.density, system, gamma, sentinel,
        E_values=task.energy.values, R=rec.R, r=rec.r,
        k_fin=horizon if gamma == 1.0 else None).to_dict())
    ccfg = resolved.get("constraint", {})
    c = float(ccfg.get("c", 0.5 / (system.H + 1)
                       if isinstance(system, systems.ChainSystem) else 0.01))
    constraint, _ = _constraint_from_config(
        {**resolved, "constraint": {"kind": "ldm", "c": c}}, task)
    record = control.run_task_rollout(task, "ldm", constraint.threshold,
                                      seed=substream_seed(resolved["seed"], "mpc"))
    audits.append(analysis.audit_rollout_guarantee(
        record, task.density, system, c=c, gamma=gamma, R=rec.R, epsilon_ls=0.0,
        k_fin=horizon if gamma == 1.0 else None, ldm=task.ldm).to_dict())
    (out / "audits.json").write_text(json.dumps(audits, indent=2))
    return EXIT_OK


def cmd_export(args) -> int:
    """Export the dataset and density/energy fields without solving."""
    resolved = resolve_config(load_config(args.config), args)
    out = _outdir(resolved)
    _echo(resolved, out)
    system = build_system(_require(resolved, "system"))
    grid = build_grid(resolved, system)
    dens = build_density(resolved, system, grid, resolved["seed"])
    energy = density_mod.to_energy(dens, resolved["density"]["floor"])
    field_to_csv(dens, out / "density.csv", {"system": system.descriptor()})
    field_to_csv(energy, out / "energy.csv", {"system": system.descriptor()})
    dcfg = resolved.get("density", {})
    if not isinstance(system, systems.ChainSystem):
        policy = _build_policy(dcfg, system)
        dataset = systems.collect_dataset(system, grid, policy,
                                          dcfg.get("n_samples", 10000),
                                          substream_seed(resolved["seed"],
                                                         "dataset"))
        dataset_to_csv(dataset, out / "dataset.csv")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldmlab",
        description="Density-aware safe control: solve, verify, plan, audit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("solve", cmd_solve), ("verify", cmd_verify),
                     ("mpc", cmd_mpc), ("sweep", cmd_sweep),
                     ("audit", cmd_audit), ("export", cmd_export)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--strict", action="store_true")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except solver.SolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
