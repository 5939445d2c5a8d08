"""Receding-horizon runtime: plan before measuring, then shift and re-budget.

Each cycle solves the convex plan from the current belief triple
(x_hat, Sigma, mu) only, so planning never peeks at the pending arrival
bit or measurement.  Once those are revealed, the applied input combines
the first planned perturbation with the realized innovation, the error
moment is updated with the realized bit, and the remainder of the plan is
shifted one stage with that innovation folded into its perturbations.
The shifted plan's own predicted constraint value becomes the next
budget, which keeps every later plan feasible by construction; the
shifted plan doubles as the warm start for its solve.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .assembly import FormExpansion, LyapunovMaps, get_expansions
from .model import ControlSpec, InitialBelief
from .prediction import (
    ErrorMoment,
    OmegaAffine,
    Policy,
    PredictionOperators,
    omega_affine_map,
    sigma_update,
)
from .solver import QcqpProblem, SolverTolerances, factor_psd_fast, solve_qcqp


class InfeasibleAtStart(Exception):
    """The initial constraint budget is unattainable.

    Carries the smallest budget that would have been feasible, so callers
    can report how much the budget must grow.
    """

    def __init__(self, budget: float, needed: float):
        super().__init__(
            f"initial budget {budget:g} is below the attainable minimum; "
            f"any budget >= {needed:g} is feasible")
        self.budget = budget
        self.needed = needed


class MissingMeasurement(Exception):
    """Arrival bit is 1 but no measurement was supplied."""


@dataclass
class ControllerState:
    """Belief triple plus the most recent plan.

    theta_tail carries the shifted previous plan between cycles: it is
    the feasibility witness for the pending solve and its warm start.
    """

    k: int
    x_hat: np.ndarray
    Sigma: ErrorMoment
    mu: float
    theta_star: Optional[Policy] = None
    J_k: float = float("nan")
    theta_tail: Optional[Policy] = None
    solver_status: str = ""
    solver_iterations: int = 0


@dataclass
class StepRecord:
    """Everything observable about one closed-loop cycle.

    stage_cost and stage_con are evaluated on the true state when the
    simulator provides one, NaN otherwise; y is None on a lost packet.
    """

    k: int
    u: np.ndarray
    gamma: int
    y: Optional[np.ndarray]
    x_hat_next: np.ndarray
    mu_next: float
    stage_cost: float
    stage_con: float
    J_k: float
    solver_status: str


@dataclass(eq=False)
class PlanContext:
    """Per-(model, gains, spec) precomputation shared across steps.

    Concurrent episodes may share one context: every field is read-only
    after construction.
    """

    cexp: FormExpansion
    kexp: FormExpansion
    omega: OmegaAffine
    tol: SolverTolerances


def make_context(ops: PredictionOperators, maps: LyapunovMaps,
                 tol: Optional[SolverTolerances] = None) -> PlanContext:
    cexp, kexp = get_expansions(ops, maps)
    return PlanContext(cexp=cexp, kexp=kexp, omega=omega_affine_map(ops),
                       tol=tol if tol is not None else SolverTolerances())


def init(belief: InitialBelief, s: ControlSpec) -> ControllerState:
    """Fresh episode state: the budget starts at epsilon."""
    return ControllerState(
        k=0,
        x_hat=np.array(belief.x_hat0, dtype=float),
        Sigma=ErrorMoment(np.array(belief.Sigma0, dtype=float)),
        mu=float(s.epsilon),
    )


def plan(st: ControllerState, ops: PredictionOperators, maps: LyapunovMaps,
         ctx: Optional[PlanContext] = None):
    """Solve the budgeted plan from (x_hat, Sigma, mu) alone.

    Returns (theta_star, J_k) and records them on the state.  Raises
    InfeasibleAtStart when the very first budget is unattainable; later
    budgets equal the shifted previous plan's own constraint value, so
    that plan is a feasible point and infeasibility cannot recur.
    """
    if ctx is None:
        ctx = make_context(ops, maps)
    Om, OmN = ctx.omega.eval(st.Sigma)
    cost = ctx.cexp.form(Om, OmN, st.x_hat)
    con = ctx.kexp.form(Om, OmN, st.x_hat)
    prob = QcqpProblem(cost=cost, constraint=con, budget=float(st.mu))
    warm = None
    if st.theta_tail is not None:
        warm = ops.flatten_policy(st.theta_tail)
    else:
        # cold solve: triangular factors beat the solver's internal
        # eigenvalue route by an order of magnitude
        prob.G0 = factor_psd_fast(cost.Hess)
        prob.G1 = factor_psd_fast(con.Hess)
    sol = solve_qcqp(prob, tol=ctx.tol, warm_start=warm)
    if sol.status == "infeasible":
        if st.k == 0:
            raise InfeasibleAtStart(float(st.mu), sol.constraint_value)
        # unreachable: theta_tail attains the budget
        raise RuntimeError(
            f"plan at k={st.k} reported infeasible despite a feasible shift")
    st.theta_star = ops.unflatten_policy(sol.theta_opt)
    st.J_k = sol.cost_value
    st.solver_status = sol.status
    st.solver_iterations = sol.iterations
    return st.theta_star, st.J_k


def apply(st: ControllerState, theta_star: Policy, gamma: int, z,
          ops: PredictionOperators):
    """Form the input from the first planned stage and step the estimate.

    u = K x_hat + c*_0 + gamma L*_00 (z - C x_hat), followed by the
    one-step predictor with the same innovation.
    """
    m, g = ops.model, ops.gains
    if gamma:
        if z is None:
            raise MissingMeasurement(f"arrival bit set at k={st.k} with no data")
        innov = np.asarray(z, dtype=float) - m.C @ st.x_hat
    else:
        innov = np.zeros(m.n_y)
    u = g.K @ st.x_hat + theta_star.c[:m.n_u] + theta_star.L[:m.n_u, :m.n_y] @ innov
    x_next = m.A @ st.x_hat + m.B @ u + gamma * (m.A @ (g.M @ innov))
    return u, x_next


def tail_policy(ops: PredictionOperators, theta_star: Policy, gamma: int,
                innovation) -> Policy:
    """Shift the plan one stage, folding in the realized innovation.

    The surviving perturbations absorb the first innovation column of L;
    the remaining columns shift up-left and the freed last stage carries
    no decision.
    """
    m, N = ops.model, ops.spec.N
    n_u, n_y = m.n_u, m.n_y
    zeta = np.zeros(n_y)
    if gamma and innovation is not None:
        zeta = np.asarray(innovation, dtype=float)
    c = np.zeros(N * n_u)
    L = np.zeros_like(theta_star.L)
    if N > 1:
        c[:-n_u] = theta_star.c[n_u:] + theta_star.L[n_u:, :n_y] @ zeta
        L[:-n_u, :-n_y] = theta_star.L[n_u:, n_y:]
    return Policy(c=c, L=L)


def update_mu(theta_circ: Policy, x_hat_next, Sigma_next,
              ops: PredictionOperators, maps: LyapunovMaps,
              ctx: Optional[PlanContext] = None) -> float:
    """Next budget: the shifted plan's constraint value at the new belief."""
    if ctx is None:
        ctx = make_context(ops, maps)
    Om, OmN = ctx.omega.eval(Sigma_next)
    form = ctx.kexp.form(Om, OmN, np.asarray(x_hat_next, dtype=float))
    return float(form.value(ops.flatten_policy(theta_circ)))


def step(st: ControllerState, gamma: int, z, ops: PredictionOperators,
         maps: LyapunovMaps, ctx: Optional[PlanContext] = None, x_true=None):
    """One full cycle; returns (StepRecord, next ControllerState).

    The plan is formed first and sees only (x_hat, Sigma, mu); the
    arrival bit and measurement enter afterwards.  Stage quantities are
    evaluated on x_true when the caller supplies it.
    """
    if ctx is None:
        ctx = make_context(ops, maps)
    theta_star, J_k = plan(st, ops, maps, ctx)
    u, x_hat_next = apply(st, theta_star, gamma, z, ops)
    m = ops.model
    innovation = None
    if gamma:
        innovation = np.asarray(z, dtype=float) - m.C @ st.x_hat
    Sigma_next = sigma_update(m, ops.gains, st.Sigma, gamma)
    theta_circ = tail_policy(ops, theta_star, gamma, innovation)
    mu_next = update_mu(theta_circ, x_hat_next, Sigma_next, ops, maps, ctx)

    stage_cost = stage_con = float("nan")
    if x_true is not None:
        x = np.asarray(x_true, dtype=float)
        s = ops.spec
        stage_cost = float(x @ (s.Q @ x) + u @ (s.R @ u))
        Hx = s.H @ x
        stage_con = float(Hx @ Hx)

    rec = StepRecord(
        k=st.k, u=u, gamma=int(gamma),
        y=np.asarray(z, dtype=float) if gamma else None,
        x_hat_next=x_hat_next, mu_next=mu_next,
        stage_cost=stage_cost, stage_con=stage_con,
        J_k=J_k, solver_status=st.solver_status,
    )
    nxt = ControllerState(
        k=st.k + 1, x_hat=x_hat_next, Sigma=Sigma_next, mu=mu_next,
        theta_star=theta_star, J_k=J_k, theta_tail=theta_circ,
        solver_status=st.solver_status,
        solver_iterations=st.solver_iterations,
    )
    return rec, nxt
