"""Lyapunov density models on state-action grids.

Compute the maximal LDM of a dynamical system and a data distribution by
exact value iteration, verify its invariance guarantees, extract control
Lyapunov functions, audit the approximation-error bounds, and run
constrained model-predictive control against it.
"""

from .core import (DatasetError, GridError, ScalarField, StateActionGrid,
                   SublevelSet, TransitionDataset, cell_to_coords,
                   coords_to_cell, dataset_from_csv, dataset_to_csv,
                   field_from_csv, field_lookup, field_to_csv,
                   state_field_lookup, sublevel_set)
from .systems import (ChainSystem, GaussianActionPolicy, LinearSpiralSystem,
                      LqrController, TableSystem, ToricPolicy, build_chain,
                      build_linear_spiral, collect_dataset,
                      fit_linear_dynamics, random_table_system,
                      reference_spiral_grid, snap_to_table, solve_lqr,
                      solve_lqr_for)
from .density import (DensityConfig, DensityError, analytic_density,
                      estimate_density, to_energy)
from .solver import (FittedLdmRun, RegressorConfig, SolveReport, SolverConfig,
                     SolverError, brute_force_ldm, brute_force_ldm_converged,
                     fitted_ldm_iteration, ldm_backup, min_continuation,
                     sampled_expected_backup, solve_maximal_ldm,
                     verify_ldm_conditions)
from .analysis import (AnalysisError, BoundAudit, InvarianceReport,
                       RecoverabilityReport, audit_fqi_bound,
                       audit_reward_bound, audit_rollout_guarantee,
                       compute_recoverability, extract_clf, verify_invariance)
from .control import (ConstraintSpec, ControlError, MpcConfig, RolloutRecord,
                      SweepTask, greedy_policy, make_mpc_policy, mpc_step,
                      percentile_threshold, rollout, rollout_to_csv,
                      run_task_rollout, sweep_summary, sweep_to_csv,
                      threshold_sweep)

__version__ = "0.1.0"
