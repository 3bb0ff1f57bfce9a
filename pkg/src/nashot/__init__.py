"""Nash bargaining over a surplus measure and its optimal-transport continuum limit."""
from .continuum import ContinuumSolution, GBound, check_density_cap, holder_seminorm, minimize_f, objective
from .discrete import (AllocationPlan, PlayerSet, alpha_bounds_check, objective_f2, objective_np1,
                       ratio_residual, reassignment_gain, solve_nash, verify_cyclical_monotonicity)
from .errors import (ConvergenceError, ConvexityError, EmptyCellError, MassMismatchError, NashOTError,
                     RangeError, StructureError)
from .harness import (ConvergenceRecord, DensitySpec, ExperimentConfig, evaluate_p3, run_convergence,
                      sample_players, step4_bound)
from .laguerre import (LaguerreDecomposition, LaguerrePotential, decompose, max_cell_diameter,
                       pushforward_beta, solve_semidiscrete)
from .measure import (Box, CostSpec, DiscreteMeasure, GridMeasure, TransportResult, cost_shift_bound,
                      relative_entropy, wasserstein)
from .pde import (PotentialField, euler_lagrange_residual, functional_g, monge_ampere_residual,
                  potential_from_beta)

__version__ = "0.1.0"

__all__ = [
    "ContinuumSolution",
    "GBound",
    "check_density_cap",
    "holder_seminorm",
    "minimize_f",
    "objective",
    "AllocationPlan",
    "PlayerSet",
    "alpha_bounds_check",
    "objective_f2",
    "objective_np1",
    "ratio_residual",
    "reassignment_gain",
    "solve_nash",
    "verify_cyclical_monotonicity",
    "ConvergenceError",
    "ConvexityError",
    "EmptyCellError",
    "MassMismatchError",
    "NashOTError",
    "RangeError",
    "StructureError",
    "ConvergenceRecord",
    "DensitySpec",
    "ExperimentConfig",
    "evaluate_p3",
    "run_convergence",
    "sample_players",
    "step4_bound",
    "LaguerreDecomposition",
    "LaguerrePotential",
    "decompose",
    "max_cell_diameter",
    "pushforward_beta",
    "solve_semidiscrete",
    "Box",
    "CostSpec",
    "DiscreteMeasure",
    "GridMeasure",
    "TransportResult",
    "cost_shift_bound",
    "relative_entropy",
    "wasserstein",
    "PotentialField",
    "euler_lagrange_residual",
    "functional_g",
    "monge_ampere_residual",
    "potential_from_beta",
]
