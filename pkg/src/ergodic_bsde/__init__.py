"""Monte-Carlo laboratory for ergodic BSDEs and the large-time behaviour
of HJB solutions over dissipative Ornstein-Uhlenbeck dynamics."""

from .model import (Model, ModelSpec, DriverSpec, TerminalSpec, TerminalKind,
                    KnownSolution, PresetBundle, build_model, preset,
                    preset_names)
from .basis import PolynomialBasis, PiecewiseLinearBasis
from .sde import (PathEnsemble, simulate_paths, replay_states, semigroup_apply,
                  coupling_decay, DecayCurve, ensemble_summary)
from .bsde import (BsdeSolution, solve_bsde, solve_bsde_from, evaluate_fields,
                   residual_diagnostics, save_solution, load_solution)
from .ergodic import (ErgodicSolution, exact_ergodic_solution,
                      solve_ebsde_discounted, estimate_lambda_slope, cross_check)
from .asymptotics import (SolverParams, compute_w, w_curve, fit_limit_and_rate,
                          approximate_v_from_finite_horizon, x_growth_sweep,
                          build_report, AsymptoticsReport)
from .control import (ControlProblem, hamiltonian, hamiltonian_driver,
                      simulate_controlled, optimal_policy_from_bsde,
                      constant_policy, expansion_report, ExpansionBudgets,
                      CostEstimator)
from .config import ExperimentPlan, ExperimentKind, parse_config, render_plan

__version__ = "0.1.0"
