"""Output-feedback stochastic MPC for linear plants with lossy measurements.

Modules:
    model       plant/cost containers, gain synthesis, stability certificates
    prediction  block prediction operators and exact predicted moments
    assembly    terminal elimination and explicit quadratic cost/constraint
    solver      convex QCQP solve via a two-cone second-order reformulation
    controller  receding-horizon loop: plan, apply, shift, re-budget
    simcli      plant simulator, Monte Carlo campaigns, baselines, CLI
"""

from .model import (
    ControlSpec,
    DimensionMismatch,
    Gains,
    InitialBelief,
    ModelError,
    NotDetectable,
    NotPSD,
    NotStabilizable,
    RiccatiDiverged,
    SystemModel,
    check_discounted_lyapunov,
    check_ms_stability,
    synthesize_K,
    synthesize_M,
    synthesize_gains,
    validate_model,
)

__all__ = [
    "SystemModel",
    "ControlSpec",
    "InitialBelief",
    "Gains",
    "ModelError",
    "DimensionMismatch",
    "NotPSD",
    "NotStabilizable",
    "NotDetectable",
    "RiccatiDiverged",
    "validate_model",
    "synthesize_K",
    "synthesize_M",
    "synthesize_gains",
    "check_ms_stability",
    "check_discounted_lyapunov",
]

__version__ = "0.1.0"
