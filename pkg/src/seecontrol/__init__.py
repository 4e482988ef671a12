"""Numerical verification of sufficient optimality conditions for controlled
stochastic evolution equations, truncated to a spectral basis."""

__version__ = "0.1.0"

from .backward import (
    AdjointPairEnsemble,
    BSEERegressor,
    RiccatiLQAdjoint,
    riccati_feedback,
    riccati_solution,
    solve_bsee_regression,
)
from .forward import ForwardPathEnsemble, ForwardSimulator, simulate_forward
from .presets import PRESETS, LQSpec, make_preset
from .problem import (
    BallSet,
    BoxSet,
    CoefficientBundle,
    ControlProcess,
    HamiltonianMinimizer,
    ProblemDefinition,
    cost_eval,
    finite_diff_check,
    hamiltonian_eval,
    hamiltonian_grad_nu,
    hamiltonian_grad_x,
)
from .spectral import SpectralBasis, WienerIncrements, refine_same_noise, sample_wiener_increments
from .verify import (
    OptimalityVerifier,
    VerificationReport,
    check_duality_batch,
    check_duality_identity,
    compare_costs,
    random_alternatives,
)

__all__ = [
    "AdjointPairEnsemble", "BSEERegressor", "BallSet", "BoxSet", "CoefficientBundle",
    "ControlProcess", "ForwardPathEnsemble", "ForwardSimulator", "HamiltonianMinimizer",
    "LQSpec", "OptimalityVerifier", "PRESETS", "ProblemDefinition", "RiccatiLQAdjoint",
    "SpectralBasis", "VerificationReport", "WienerIncrements", "check_duality_batch",
    "check_duality_identity", "compare_costs", "cost_eval", "finite_diff_check",
    "hamiltonian_eval", "hamiltonian_grad_nu", "hamiltonian_grad_x", "make_preset",
    "random_alternatives", "refine_same_noise", "riccati_feedback", "riccati_solution",
    "sample_wiener_increments", "simulate_forward", "solve_bsee_regression",
]
