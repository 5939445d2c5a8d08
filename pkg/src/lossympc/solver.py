"""Dense solver for the one-constraint convex QCQP.

The problem  min 1/2 th'H0 th + g0'th + c0  s.t.  1/2 th'H1 th + g1'th + c1 <= mu
is reformulated with epigraph variable t into a two-cone second-order program

    min t   s.t.  (y0 + 1, 2 G0 th, y0 - 1) in Q,   y0 = t - g0'th - c0
                  (y1 + 1, 2 G1 th, y1 - 1) in Q,   y1 = mu - g1'th - c1

with Gi'Gi = Hi/2 (eigenvalue square roots, negative eigenvalues clipped).
The cone program is solved by a Nesterov-Todd scaled Mehrotra
predictor-corrector method specialized to the two-cone structure; an embedded
conic solver is kept as a fallback for the rare non-converged instance.

Infeasibility is decided before any cone iteration: the constraint form's
unconstrained minimum vmin is computable in closed form, and the instance is
infeasible iff vmin > mu (then vmin is the smallest budget that would have
been feasible, which the caller surfaces as a diagnostic).

Solves are pure functions of their inputs; nothing here holds mutable state,
so concurrent solves are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg.lapack import dpotrf, dpotrs, dpstrf

from .assembly import QuadraticForm
from .model import DimensionMismatch


@dataclass
class SolverTolerances:
    feas_rel: float = 1e-8      # constraint tolerance: feas_rel * (1 + |mu|)
    gap_rel: float = 1e-9       # relative duality gap target
    kkt_rel: float = 1e-6       # scaled KKT residual accepted as optimal
    handoff: float = 1e-4       # scaled residual at which the cone iteration
                                # hands the iterate to Newton refinement
    max_iter: int = 100


@dataclass
class QcqpProblem:
    cost: QuadraticForm
    constraint: QuadraticForm
    budget: float
    # optional precomputed cone factors (Gi'Gi = Hess_i / 2); computed if None
    G0: Optional[np.ndarray] = None
    G1: Optional[np.ndarray] = None


@dataclass
class QcqpSolution:
    theta_opt: np.ndarray
    cost_value: float
    constraint_value: float
    status: str                 # optimal | infeasible | max_iter
    kkt_residual: float
    iterations: int = 0
    nu: float = 0.0             # multiplier of the quadratic constraint


@dataclass
class KktReport:
    nu: float
    stationarity: float
    complementarity: float
    primal_feasibility: float
    scaled_residual: float


def factor_psd(H: np.ndarray, clip: float = 0.0) -> np.ndarray:
    """G with G'G = H/2 via symmetric eigendecomposition, negatives clipped."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.clip(w, clip, None)
    return (V * np.sqrt(0.5 * w)).T


def factor_psd_chol(H: np.ndarray) -> np.ndarray:
    """Cholesky factor of H/2 when H is PD; raises LinAlgError otherwise."""
    return np.linalg.cholesky(0.5 * (H + H.T)).T


def factor_psd_fast(H: np.ndarray) -> np.ndarray:
    """G with G'G = H/2, preferring triangular factorizations.

    Plain Cholesky covers the definite case and pivoted Cholesky the
    semidefinite one, each an order of magnitude cheaper than the
    eigenvalue route, which remains the fallback.  Intended for repeated
    solves of slowly varying instances where factorization dominates.
    """
    A = 0.25 * (H + H.T)
    c, info = dpotrf(A, lower=0)
    if info == 0:
        return np.triu(c)
    c, piv, rank, _ = dpstrf(A, lower=0)
    if rank > 0:
        G = np.zeros((rank, A.shape[0]))
        G[:, piv - 1] = np.triu(c)[:rank]
        if np.abs(G.T @ G - A).max() <= 1e-11 * max(1.0, np.abs(A).max()):
            return G
    return factor_psd(H)


def _pinv_solve(H: np.ndarray, b: np.ndarray, rcond: float = 1e-12):
    """Minimum-norm solution of H x = b for symmetric PSD H.

    Returns (x, exact): exact is False when b has a component outside
    range(H), i.e. the quadratic 1/2 x'Hx - b'x is unbounded below.
    """
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    lead = np.abs(w).max(initial=0.0)
    keep = w > rcond * max(lead, 1.0)
    bt = V.T @ b
    x = V[:, keep] @ (bt[keep] / w[keep])
    exact = bool(np.linalg.norm(bt[~keep]) <= 1e-9 * max(1.0, np.linalg.norm(b)))
    return x, exact


def _argmin_quadratic(H: np.ndarray, g: np.ndarray):
    """Minimizer of 1/2 x'Hx + g'x for PSD H, as (x, exact).

    A ridged Cholesky solve covers the common well-conditioned case; the
    residual check catches both rank deficiency along g (large null-space
    component blows the residual up) and a failed factorization, falling
    back to the eigenvalue route of _pinv_solve.
    """
    n = H.shape[0]
    scale = max(1.0, float(np.abs(H).max(initial=0.0)))
    Hr = 0.5 * (H + H.T) + (1e-12 * scale) * np.eye(n)
    c, info = dpotrf(Hr, lower=1)
    if info == 0:
        x, info = dpotrs(c, -g, lower=1)
        if info == 0:
            res = float(np.linalg.norm(H @ x + g))
            if res <= 1e-8 * max(1.0, float(np.linalg.norm(g))):
                return x, True
    return _pinv_solve(H, -g)


# ---------------------------------------------------------------------------
# two-cone NT-scaled predictor-corrector
#
# Both cones always have the same size here (each Gi is n x n), so cone
# vectors are kept as (2, m) arrays and every Jordan-algebra operation acts
# on both rows at once.


def _jd2(X: np.ndarray) -> np.ndarray:
    # per-row x' J x with J = diag(1, -I)
    return X[:, 0] ** 2 - np.einsum("ij,ij->i", X[:, 1:], X[:, 1:])


def _jm2(X: np.ndarray) -> np.ndarray:
    Y = -X
    Y[:, 0] = X[:, 0]
    return Y


def _jprod2(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    out = X[:, :1] * Y
    out[:, 1:] += Y[:, :1] * X[:, 1:]
    out[:, 0] = np.einsum("ij,ij->i", X, Y)
    return out


def _jsolve2(L: np.ndarray, D: np.ndarray) -> np.ndarray:
    # per-row solve of lam o u = d by block elimination; the determinant can
    # underflow by cancellation at extreme ill-conditioning, in which case the
    # non-finite result is caught by the step-acceptance checks downstream
    l0 = L[:, 0]
    lb = L[:, 1:]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        det = l0 ** 2 - np.einsum("ij,ij->i", lb, lb)
        t = (l0 * D[:, 0] - np.einsum("ij,ij->i", lb, D[:, 1:])) / det
        U = np.empty_like(D)
        U[:, 0] = t
        U[:, 1:] = (D[:, 1:] - t[:, None] * lb) / l0[:, None]
    return U


def _tv2(V: np.ndarray, X: np.ndarray) -> np.ndarray:
    # per-row T(v) x with T(v) = [[v0, v1'], [v1, I + v1 v1'/(1+v0)]]
    x0 = X[:, 0].copy()
    vx = np.einsum("ij,ij->i", V[:, 1:], X[:, 1:])
    out = X.copy()
    out[:, 0] = np.einsum("ij,ij->i", V, X)
    out[:, 1:] += V[:, 1:] * ((x0 + vx / (1.0 + V[:, 0]))[:, None])
    return out


def _nt2(S: np.ndarray, W: np.ndarray):
    """NT scaling points of both cones: (V, eta) with W_c = eta_c T(v_c).

    T(v) is the symmetric square root of 2vv' - J (v'Jv = 1); it maps
    w/gw to s/gs exactly, and eta^2 = gs/gw absorbs the scale, so
    W w = W^{-1} s = lambda, the scaled point.
    """
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        gs = np.sqrt(_jd2(S))
        gw = np.sqrt(_jd2(W))
        Sb = S / gs[:, None]
        Wb = W / gw[:, None]
        gamma = np.sqrt((1.0 + np.einsum("ij,ij->i", Sb, Wb)) / 2.0)
        V = (Sb + _jm2(Wb)) / (2.0 * gamma[:, None])
        return V, np.sqrt(gs / gw)


def _alpha2(X: np.ndarray, DX: np.ndarray) -> float:
    """sup alpha with X + alpha DX inside both cones, X interior.

    Per row f(alpha) = a alpha^2 + 2 b alpha + c with f(0) = c > 0; roots
    via the cancellation-free formula so a near-linear direction cannot
    produce a spurious tiny root.
    """
    a = _jd2(DX)
    b = X[:, 0] * DX[:, 0] - np.einsum("ij,ij->i", X[:, 1:], DX[:, 1:])
    c = _jd2(X)
    best = np.inf
    for i in range(2):
        ai, bi, ci = a[i], b[i], c[i]
        if ai != 0.0:
            disc = bi * bi - ai * ci
            if disc >= 0.0:
                qq = -(bi + np.copysign(np.sqrt(disc), bi))
                for root in ((qq / ai,) if qq == 0.0 else (qq / ai, ci / qq)):
                    if 0.0 < root < best:
                        best = root
        elif bi < 0.0:
            r = -ci / (2.0 * bi)
            if 0.0 < r < best:
                best = r
        if DX[i, 0] < 0.0:
            r = -X[i, 0] / DX[i, 0]
            if 0.0 < r < best:
                best = r
    return best


def _socp_ipm(Gmat: np.ndarray, h: np.ndarray, q: np.ndarray, dims: tuple,
              z0: np.ndarray, tol: SolverTolerances):
    """min q'z s.t. h - Gmat z in Q_m x Q_m; z0 strictly feasible.

    Search directions are computed in the NT-scaled space (dst = W^{-1} ds,
    dwt = W dw), where step lengths and the Mehrotra correction involve only
    the scaled point lambda; unscaling happens once per accepted step.  The
    normal matrix uses T(v)^2 = 2vv' - J, giving
        G' W^{-2} G = sum_c (2 p_c p_c' - G_c' J G_c) / eta_c^2
    with p_c = G_c'(J v_c), so the constant middle matrices are formed once.

    Returns (z, iters, converged); when the run stops short of the targets
    the best iterate by scaled residual is handed back for refinement.
    """
    m0, m1 = dims
    mm = max(m0, m1)
    nz = Gmat.shape[1]
    if m0 == m1:
        G3 = Gmat.reshape(2, mm, nz)
        h2 = h.reshape(2, mm)
    else:
        # unequal cones are padded with zero rows, which stay exactly zero
        # through every Jordan operation and so never influence the iterates
        G3 = np.zeros((2, mm, nz))
        h2 = np.zeros((2, mm))
        G3[0, :m0], G3[1, :m1] = Gmat[:m0], Gmat[m0:]
        h2[0, :m0], h2[1, :m1] = h[:m0], h[m0:]
        Gmat = G3.reshape(2 * mm, nz)
        h = h2.reshape(-1)
    GJG = np.empty((2, nz, nz))
    for c in range(2):
        Gj = G3[c].copy()
        Gj[1:] = -Gj[1:]
        GJG[c] = G3[c].T @ Gj

    z = z0.copy()
    S = h2 - G3 @ z
    if not (np.all(S[:, 0] > 0.0) and np.all(_jd2(S) > 0.0)):
        return z, 0, False
    # dual start w_c = (jd_c/2) s_c^{-1}: centered per cone, and the epigraph
    # channel of G'w + q starts exactly at zero since s_0[0] - s_0[-1] = 2;
    # W inherits strict interiority from S
    W = 0.5 * _jm2(S)

    hscale = max(1.0, float(np.linalg.norm(h)))
    qscale = max(1.0, float(np.linalg.norm(q)))
    best = (np.inf, z.copy())
    it = 0
    for it in range(tol.max_iter):
        rx = Gmat.T @ W.reshape(-1) + q
        Rz = S + G3 @ z - h2
        gap = float(np.einsum("ij,ij->", S, W))
        mu_ip = gap / 2.0
        pobj = float(q @ z)
        dobj = -float(np.einsum("ij,ij->", h2, W))
        relgap = abs(pobj - dobj) / max(1.0, abs(pobj))
        pres = float(np.linalg.norm(Rz)) / hscale
        dres = float(np.linalg.norm(rx)) / qscale
        score = max(relgap, pres, dres)
        if score < best[0]:
            best = (score, z.copy())
        if score <= tol.handoff:
            # close enough for the Newton refinement to take over
            return z, it, True

        V, eta = _nt2(S, W)
        lam = _tv2(V, W) * eta[:, None]
        Jv = _jm2(V)
        P = np.einsum("cij,ci->cj", G3, Jv)
        ie2 = 1.0 / eta ** 2
        A = (2.0 * ie2[0]) * np.outer(P[0], P[0]) \
            + (2.0 * ie2[1]) * np.outer(P[1], P[1]) \
            - (ie2[0] * GJG[0] + ie2[1] * GJG[1])
        jitter = 0.0
        for _ in range(3):
            Ach, info = dpotrf(A if jitter == 0.0 else A + jitter * np.eye(nz),
                               lower=1)
            if info == 0:
                break
            jitter = max(10.0 * jitter, 1e-14 * max(1.0, np.trace(A) / nz))
        else:
            return best[1], it, False

        WiRz = _tv2(Jv, Rz) / eta[:, None]

        def newton(D):
            t1 = _jsolve2(lam, D)
            u = _tv2(Jv, t1 + WiRz) / eta[:, None]
            rhs = -rx - u.reshape(-1) @ Gmat
            dz, _ = dpotrs(Ach, rhs, lower=1)
            dst = -WiRz - _tv2(Jv, G3 @ dz) / eta[:, None]
            dwt = t1 - dst
            return dz, dst, dwt

        d = -_jprod2(lam, lam)
        dz_a, dst_a, dwt_a = newton(d)
        alpha_aff = min(1.0, _alpha2(lam, dst_a), _alpha2(lam, dwt_a))
        mu_aff = float(np.einsum("ij,ij->", lam + alpha_aff * dst_a,
                                 lam + alpha_aff * dwt_a)) / 2.0
        sigma = min(1.0, max(0.0, mu_aff / mu_ip)) ** 3 if mu_ip > 0 else 0.0

        d -= _jprod2(dst_a, dwt_a)
        d[:, 0] += sigma * mu_ip
        dz, dst, dwt = newton(d)

        alpha = min(1.0, 0.99 * min(_alpha2(lam, dst), _alpha2(lam, dwt)))
        if alpha <= 1e-13:
            return best[1], it, False
        z += alpha * dz
        S += alpha * (_tv2(V, dst) * eta[:, None])
        W += alpha * (_tv2(Jv, dwt) / eta[:, None])
        jd = _jd2(S)
        if not (np.all(S[:, 0] > 0.0) and np.all(jd > 0.0)
                and np.all(W[:, 0] > 0.0) and np.all(_jd2(W) > 0.0)):
            return best[1], it, False
    return best[1], tol.max_iter, False


# ---------------------------------------------------------------------------
# cone program assembly and fallback


def _build_socp(G0, g0, c0, G1, g1, c1, mu):
    n = G0.shape[1]
    r0, r1 = G0.shape[0], G1.shape[0]
    m0, m1 = r0 + 2, r1 + 2
    nz = n + 1
    Gmat = np.zeros((m0 + m1, nz))
    h = np.zeros(m0 + m1)
    # cone 0: (y0+1, 2 G0 th, y0-1), y0 = t - g0'th - c0
    Gmat[0, :n] = g0
    Gmat[0, n] = -1.0
    Gmat[1:1 + r0, :n] = -2.0 * G0
    Gmat[1 + r0, :n] = g0
    Gmat[1 + r0, n] = -1.0
    h[0] = 1.0 - c0
    h[1 + r0] = -1.0 - c0
    # cone 1: (y1+1, 2 G1 th, y1-1), y1 = mu - g1'th - c1
    o = m0
    Gmat[o, :n] = g1
    Gmat[o + 1:o + 1 + r1, :n] = -2.0 * G1
    Gmat[o + 1 + r1, :n] = g1
    h[o] = mu - c1 + 1.0
    h[o + 1 + r1] = mu - c1 - 1.0
    q = np.zeros(nz)
    q[n] = 1.0
    return Gmat, h, q, (m0, m1)


def _fallback_conic(Gmat, h, q, dims):
    """Embedded conic solver on the same two-cone program."""
    try:
        import clarabel
        from scipy import sparse
    except ImportError:
        return None
    P = sparse.csc_matrix((len(q), len(q)))
    A = sparse.csc_matrix(Gmat)
    cones = [clarabel.SecondOrderConeT(dims[0]), clarabel.SecondOrderConeT(dims[1])]
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    solver = clarabel.DefaultSolver(P, q, A, h, cones, settings)
    res = solver.solve()
    if str(res.status) not in ("Solved", "AlmostSolved"):
        return None
    return np.asarray(res.x)


# ---------------------------------------------------------------------------
# public entry points


def check_kkt(p: QcqpProblem, sol: QcqpSolution) -> KktReport:
    """Stationarity, complementarity, and feasibility residuals at a solution.

    The multiplier is recovered by least squares from the stationarity
    equation and clipped at zero.
    """
    th = sol.theta_opt
    gc = p.cost.Hess @ th + p.cost.lin
    gk = p.constraint.Hess @ th + p.constraint.lin
    denom = float(gk @ gk)
    conval = p.constraint.value(th)
    slack = p.budget - conval
    tol_act = 1e-7 * (1.0 + abs(p.budget))
    if denom <= 1e-300 or not np.isfinite(slack) or slack > tol_act:
        nu = 0.0
    else:
        nu = max(0.0, -float(gk @ gc) / denom)
    stat = float(np.linalg.norm(gc + nu * gk))
    # guard nu = 0 with infinite slack, where the product is indeterminate
    comp = abs(nu * slack) if nu > 0.0 else 0.0
    pfeas = max(0.0, -slack)
    # residuals are relative to the magnitude of the terms entering them,
    # else badly conditioned instances demand sub-eps absolute accuracy
    gscale = 1.0 + float(np.linalg.norm(gc)) + nu * float(np.linalg.norm(gk))
    mscale = 1.0 + abs(p.budget)
    scaled = max(stat / gscale, comp / ((1.0 + nu) * mscale), pfeas / mscale)
    return KktReport(nu=nu, stationarity=stat, complementarity=comp,
                     primal_feasibility=pfeas, scaled_residual=scaled)


def _polish(p: QcqpProblem, theta: np.ndarray) -> np.ndarray:
    """Newton refinement of the active-constraint KKT system.

    The cone solve leaves theta at distance ~sqrt(gap) from the optimum;
    a few Newton steps on [grad_cost + nu grad_con; con - mu] recover full
    precision.  Keeps the input point whenever a step does not improve the
    scaled residual.
    """
    mu = float(p.budget)

    def residual(th):
        gc = p.cost.Hess @ th + p.cost.lin
        gk = p.constraint.Hess @ th + p.constraint.lin
        den = float(gk @ gk)
        nu = max(0.0, -float(gk @ gc) / den) if den > 1e-300 else 0.0
        gsc = 1.0 + np.linalg.norm(gc) + nu * np.linalg.norm(gk)
        stat = np.linalg.norm(gc + nu * gk)
        viol = max(0.0, p.constraint.value(th) - mu)
        return max(stat / gsc, viol / (1.0 + abs(mu))), nu

    best_th = theta
    best_r, nu = residual(theta)
    if nu <= 0.0:
        return best_th
    th = theta.copy()
    n = th.shape[0]
    for _ in range(8):
        gc = p.cost.Hess @ th + p.cost.lin
        gk = p.constraint.Hess @ th + p.constraint.lin
        F = np.concatenate([gc + nu * gk, [p.constraint.value(th) - mu]])
        K = np.zeros((n + 1, n + 1))
        K[:n, :n] = p.cost.Hess + nu * p.constraint.Hess
        K[:n, n] = gk
        K[n, :n] = gk
        try:
            step = np.linalg.solve(K, -F)
        except np.linalg.LinAlgError:
            break
        th = th + step[:n]
        nu = max(0.0, nu + step[n])
        r, _ = residual(th)
        if r < best_r:
            best_r, best_th = r, th.copy()
        if r < 1e-11:
            break
    return best_th


def _finish(p: QcqpProblem, theta: np.ndarray, status: str, iters: int) -> QcqpSolution:
    sol = QcqpSolution(
        theta_opt=theta,
        cost_value=p.cost.value(theta),
        constraint_value=p.constraint.value(theta),
        status=status,
        kkt_residual=np.inf,
        iterations=iters,
    )
    if status == "optimal":
        rep = check_kkt(p, sol)
        sol.kkt_residual = rep.scaled_residual
        sol.nu = rep.nu
    return sol


def _nullspace_min(p: QcqpProblem, theta_c: np.ndarray) -> np.ndarray:
    """Minimize the cost over theta_c + null(H1) (degenerate feasible set)."""
    H1 = p.constraint.Hess
    w, V = np.linalg.eigh(0.5 * (H1 + H1.T))
    lead = max(1.0, float(np.abs(w).max(initial=0.0)))
    Z = V[:, w <= 1e-10 * lead]
    if Z.shape[1] == 0:
        return theta_c
    Hr = Z.T @ p.cost.Hess @ Z
    gr = Z.T @ (p.cost.Hess @ theta_c + p.cost.lin)
    y, _ = _pinv_solve(Hr, -gr)
    return theta_c + Z @ y


def solve_qcqp(p: QcqpProblem, tol: Optional[SolverTolerances] = None,
               warm_start: Optional[np.ndarray] = None) -> QcqpSolution:
    """Solve the QCQP; returns a status-carrying solution, never raises.

    status "infeasible" can only occur when the budget is below the
    constraint form's unconstrained minimum; constraint_value then reports
    that minimum (the smallest budget that would have been feasible).
    A feasible warm start near the optimum short-circuits the cone solve:
    active-set Newton refinement from it is accepted when it reaches the
    same feasibility and stationarity certificate, and otherwise the warm
    start merely seeds the interior-point iteration.
    """
    if tol is None:
        tol = SolverTolerances()
    n = p.cost.lin.shape[0]
    if p.constraint.lin.shape[0] != n:
        raise DimensionMismatch("cost and constraint dimensions differ")
    mu = float(p.budget)
    tol_feas = tol.feas_rel * (1.0 + abs(mu))

    H1, g1 = p.constraint.Hess, p.constraint.lin
    vacuous = not np.isfinite(mu) or (
        np.abs(H1).max(initial=0.0) == 0.0 and np.abs(g1).max(initial=0.0) == 0.0
        and p.constraint.const <= mu + tol_feas)

    # unconstrained minimizer; optimal outright if it has budget slack
    th_u, _ = _argmin_quadratic(p.cost.Hess, p.cost.lin)
    if vacuous:
        return _finish(p, th_u, "optimal", 0)
    if p.constraint.value(th_u) <= mu - tol_feas:
        return _finish(p, th_u, "optimal", 0)

    # a feasible warm start certifies feasibility outright.  Active-set
    # Newton straight from it usually lands the optimum in a couple of
    # steps when the start is near-optimal; the result only stands when it
    # carries the same certificate the interior-point route must produce.
    th0 = None
    if warm_start is not None and np.shape(warm_start) == (n,):
        ws = np.asarray(warm_start, float)
        val = p.constraint.value(ws)
        if val <= mu + tol_feas:
            sol = _finish(p, _polish(p, ws), "optimal", 0)
            if (sol.constraint_value <= mu + tol_feas
                    and sol.kkt_residual <= tol.kkt_rel):
                return sol
            # otherwise fall through to the interior-point route, reusing
            # the warm start for its initial point: a boundary-tight start
            # gains slack from an exact line search along the constraint's
            # steepest descent
            smin = 1e-7 * (1.0 + abs(mu))
            if val > mu - 0.01 * (1.0 + abs(mu)):
                d = -(H1 @ ws + g1)
                dd = float(d @ d)
                if dd > 0.0:
                    hd = float(d @ (H1 @ d))
                    t = dd / hd if hd > 0.0 else (1.0 + abs(mu)) / dd
                    cand = ws + t * d
                    cval = p.constraint.value(cand)
                    if cval < val:
                        ws, val = cand, cval
            if val <= mu - smin:
                th0 = ws

    if th0 is None:
        # infeasibility test via the constraint's own minimum
        th_c, exact = _argmin_quadratic(H1, g1)
        if exact:
            vmin = p.constraint.value(th_c)
            if vmin > mu + tol_feas:
                sol = _finish(p, th_c, "infeasible", 0)
                sol.constraint_value = vmin
                return sol
            if vmin >= mu - 1e-12 * (1.0 + abs(mu)):
                # feasible set collapsed to the constraint's argmin affine set
                return _finish(p, _nullspace_min(p, th_c), "optimal", 0)
        else:
            # linear part leaves range(H1): the constraint decreases without
            # bound along the leftover residual direction
            d = -(H1 @ th_c + g1)
            step = 1.0
            while p.constraint.value(th_c + step * d) > mu - max(1.0, tol_feas):
                step *= 2.0
                if not np.isfinite(step):
                    break
            th_c = th_c + step * d
        th0 = th_c

    G0 = p.G0 if p.G0 is not None else factor_psd(p.cost.Hess)
    G1f = p.G1 if p.G1 is not None else factor_psd(H1)
    Gmat, h, q, dims = _build_socp(G0, p.cost.lin, p.cost.const,
                                   G1f, g1, p.constraint.const, mu)

    c0 = p.cost.value(th0)
    # epigraph slack proportional to the cost keeps the first cone deep
    # inside its boundary even when the start has a very large cost
    z0 = np.concatenate([th0, [c0 + max(1.0, 0.25 * (1.0 + abs(c0)))]])

    z, iters, ok = _socp_ipm(Gmat, h, q, dims, z0, tol)
    sol = _finish(p, _polish(p, z[:n]), "optimal", iters)
    if sol.constraint_value <= mu + tol_feas and sol.kkt_residual <= tol.kkt_rel:
        return sol
    zf = _fallback_conic(Gmat, h, q, dims)
    if zf is not None:
        solf = _finish(p, _polish(p, zf[:n]), "optimal", iters)
        if solf.constraint_value <= mu + tol_feas and solf.kkt_residual <= tol.kkt_rel:
            return solf
    sol.status = "max_iter"
    return sol


def dump_instance(p: QcqpProblem, sol: Optional[QcqpSolution], path: str) -> None:
    """Write a solved instance as self-describing text for offline inspection."""
    with open(path, "w") as f:
        n = p.cost.lin.shape[0]
        f.write(f"qcqp n={n} budget={p.budget!r}\n")
        for name, form in (("cost", p.cost), ("constraint", p.constraint)):
            f.write(f"{name}.const {form.const!r}\n")
            f.write(f"{name}.lin " + " ".join(repr(v) for v in form.lin) + "\n")
            f.write(f"{name}.Hess rows={n}\n")
            for row in form.Hess:
                f.write("  " + " ".join(repr(v) for v in row) + "\n")
        if sol is not None:
            f.write(f"solution.status {sol.status}\n")
            f.write(f"solution.cost_value {sol.cost_value!r}\n")
            f.write(f"solution.constraint_value {sol.constraint_value!r}\n")
            f.write(f"solution.kkt_residual {sol.kkt_residual!r}\n")
            f.write("solution.theta " + " ".join(repr(v) for v in sol.theta_opt) + "\n")
