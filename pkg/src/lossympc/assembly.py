"""Explicit convex cost and constraint in the policy parameters.

The receding-horizon objective and the discounted output-energy constraint are
both of the shape

    sum_{i<N} beta^i E{stage_i(theta)}  +  discounted tail from stage N on.

The tail is eliminated with the joint second moment P of (error, estimate):
P solves P = beta E{Psit P Psit'} + Xi with Xi = beta^N X_N(theta) plus the
discounted noise constant, and tr(W P(Xi)) = tr(Wt Xi) for the adjoint weight
Wt solving Wt = beta E{Psit' Wt Psit} + W.  With Wt precomputed, the tail
reduces to beta^N tr(Wt X_N(theta)) plus a scalar, so the whole criterion is
an explicit convex quadratic in the flattened theta = (c, vec L).

Two useful structural facts fall out of the expansion and are exploited here:
the quadratic has no c-L cross terms (the estimate mean depends only on c, the
innovation sensitivity only on L), and the c-block Hessian equals the matrix
sandwiched in the L-block's Kronecker quadratic, so one constant matrix per
weight set describes both blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from weakref import WeakKeyDictionary

import numpy as np

from .model import (
    ControlSpec,
    DimensionMismatch,
    Gains,
    SystemModel,
    check_discounted_lyapunov,
    joint_map,
)
from .prediction import (
    MomentSet,
    Policy,
    PredictionOperators,
    compute_moments,
    tail_noise_matrix,
)


class LyapunovIllPosed(Exception):
    """The discounted loss-averaged second-moment map is not a contraction."""


@dataclass(eq=False)
class LyapunovMaps:
    """Offline terminal-elimination data for one (model, gains, spec)."""

    lifted_inverse: np.ndarray
    W_cost_dual: np.ndarray
    W_con_dual: np.ndarray
    noise_const_cost: float
    noise_const_con: float


@dataclass
class QuadraticForm:
    """value(theta) = 0.5 theta' Hess theta + lin' theta + const."""

    Hess: np.ndarray
    lin: np.ndarray
    const: float

    def value(self, theta: np.ndarray) -> float:
        return float(0.5 * theta @ (self.Hess @ theta) + self.lin @ theta + self.const)


def evaluate_form(f: QuadraticForm, theta: np.ndarray) -> float:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (f.lin.shape[0],):
        raise DimensionMismatch(
            f"theta has shape {theta.shape}, form expects ({f.lin.shape[0]},)")
    return f.value(theta)


def _avg_kron(m: SystemModel, g: Gains) -> np.ndarray:
    J0 = joint_map(m, g.K, g.M, 0)
    J1 = joint_map(m, g.K, g.M, 1)
    return (1.0 - m.lam) * np.kron(J0, J0) + m.lam * np.kron(J1, J1)


def build_lyapunov_maps(m: SystemModel, g: Gains, s: ControlSpec) -> LyapunovMaps:
    """Invert the discounted second-moment map and precompute dual weights.

    Raises:
        LyapunovIllPosed: spectral radius of the discounted map is >= 1.
    """
    radius = check_discounted_lyapunov(m, g, s.beta)
    if radius >= 1.0 - 1e-12:
        raise LyapunovIllPosed(f"discounted second-moment radius {radius:.6f} >= 1")
    T = s.beta * _avg_kron(m, g)
    n2 = T.shape[0]
    lifted_inverse = np.linalg.inv(np.eye(n2) - T)

    n = m.n_x
    KRK = g.K.T @ s.R @ g.K
    W_cost = np.block([[s.Q, s.Q], [s.Q, s.Q + KRK]])
    HtH = s.H.T @ s.H
    W_con = np.block([[HtH, HtH], [HtH, HtH]])

    def dual(W):
        Wt = (lifted_inverse.T @ W.ravel(order="F")).reshape((2 * n, 2 * n), order="F")
        return 0.5 * (Wt + Wt.T)

    W_cost_dual = dual(W_cost)
    W_con_dual = dual(W_con)
    noise = tail_noise_matrix(m, g, s)
    return LyapunovMaps(
        lifted_inverse=lifted_inverse,
        W_cost_dual=W_cost_dual,
        W_con_dual=W_con_dual,
        noise_const_cost=float(np.sum(W_cost_dual * noise)),
        noise_const_con=float(np.sum(W_con_dual * noise)),
    )


def solve_terminal_lyapunov(maps: LyapunovMaps, Xi: np.ndarray) -> np.ndarray:
    """P with P = beta E{Psit P Psit'} + Xi, via the precomputed inverse."""
    n2 = Xi.shape[0]
    P = (maps.lifted_inverse @ Xi.ravel(order="F")).reshape((n2, n2), order="F")
    return 0.5 * (P + P.T)


def _discount_diag(W: np.ndarray, beta: float, N: int) -> np.ndarray:
    return np.kron(np.diag(beta ** np.arange(N)), W)


@dataclass
class FormExpansion:
    """Constant coefficient matrices of one criterion's quadratic in theta.

    Per time step only the Omega blocks change; everything here is fixed per
    (operators, maps, weight set).  See .form() for the assembly map.
    """

    ops: PredictionOperators
    Sc: np.ndarray          # c-block Hessian / 2; also the L-sandwich matrix
    XC: np.ndarray          # lin_c = XC @ x_hat
    Mx: np.ndarray          # const += x_hat' Mx x_hat
    U_ey: np.ndarray        # L-linear coefficient: U_ey @ Omega_ez
    U_zz1: np.ndarray       # + U_zz1 @ Omega_zz
    U_eN: np.ndarray        # + U_eN @ Omega_N_ez
    U_zz2: np.ndarray       # + U_zz2 @ Omega_N_zz
    C_ee: np.ndarray        # const Frobenius pairings with Omega blocks
    C_ez: np.ndarray
    C_zz: np.ndarray
    C_eeN: np.ndarray
    C_ezN: np.ndarray
    C_zzN: np.ndarray
    noise: float
    row_idx: np.ndarray     # free L entries: row in L / column in L
    col_idx: np.ndarray

    def _split(self, Omega, Omega_N):
        ne = self.ops.spec.N * self.ops.model.n_x
        nx = self.ops.model.n_x
        return (Omega[:ne, :ne], Omega[:ne, ne:], Omega[ne:, ne:],
                Omega_N[:nx, :nx], Omega_N[:nx, nx:], Omega_N[nx:, nx:])

    def _L_pieces(self, Omega, Omega_N):
        O_ee, O_ez, O_zz, ON_ee, ON_ez, ON_zz = self._split(Omega, Omega_N)
        G_L = 2.0 * (self.U_ey @ O_ez + self.U_zz1 @ O_zz
                     + self.U_eN @ ON_ez + self.U_zz2 @ ON_zz)
        const = (np.sum(self.C_ee * O_ee) + np.sum(self.C_ez * O_ez)
                 + np.sum(self.C_zz * O_zz) + np.sum(self.C_eeN * ON_ee)
                 + np.sum(self.C_ezN * ON_ez) + np.sum(self.C_zzN * ON_zz)
                 + self.noise)
        return G_L, const, O_zz

    def form(self, Omega: np.ndarray, Omega_N: np.ndarray,
             x_hat: np.ndarray) -> QuadraticForm:
        ops = self.ops
        n_c = ops.spec.N * ops.model.n_u
        G_L, const, O_zz = self._L_pieces(Omega, Omega_N)
        n_t = ops.n_theta
        H = np.zeros((n_t, n_t))
        H[:n_c, :n_c] = 2.0 * self.Sc
        H[n_c:, n_c:] = 2.0 * (O_zz[np.ix_(self.col_idx, self.col_idx)]
                               * self.Sc[np.ix_(self.row_idx, self.row_idx)])
        lin = np.concatenate([self.XC @ x_hat, G_L.ravel(order="F")[ops.free_idx]])
        const = const + float(x_hat @ (self.Mx @ x_hat))
        return QuadraticForm(Hess=H, lin=lin, const=const)

    def value_batch(self, Omega: np.ndarray, Omega_N: np.ndarray,
                    x_hat_cols: np.ndarray, c_cols: np.ndarray,
                    L: np.ndarray) -> np.ndarray:
        """Values at a fixed L and many (x_hat, c) columns, vectorized."""
        G_L, const, O_zz = self._L_pieces(Omega, Omega_N)
        ScL = self.Sc @ L
        l_scalar = float(np.sum(ScL * (L @ O_zz)) + np.sum(G_L * L))
        quad_c = np.einsum("is,is->s", c_cols, self.Sc @ c_cols)
        cross = np.einsum("is,is->s", c_cols, self.XC @ x_hat_cols)
        quad_x = np.einsum("is,is->s", x_hat_cols, self.Mx @ x_hat_cols)
        return quad_c + cross + quad_x + l_scalar + const


def _expansion(ops: PredictionOperators, maps: LyapunovMaps,
               which: str) -> FormExpansion:
    m, s = ops.model, ops.spec
    N, n_x = s.N, m.n_x
    betaN = s.beta ** N
    if which == "cost":
        Ybar = _discount_diag(s.Q, s.beta, N)
        Rbar = _discount_diag(s.R, s.beta, N)
        Wt = maps.W_cost_dual
        noise = maps.noise_const_cost
    else:
        Ybar = _discount_diag(s.H.T @ s.H, s.beta, N)
        Rbar = None
        Wt = maps.W_con_dual
        noise = maps.noise_const_con
    W11 = Wt[:n_x, :n_x]
    W12 = Wt[:n_x, n_x:]
    W21 = Wt[n_x:, :n_x]
    W22 = Wt[n_x:, n_x:]

    T_B, T_AM, S_Phi = ops.T_PhiB, ops.T_PhiA_M, ops.S_Phi
    TN_B, TN_AM, SN = ops.T_PhiB_N, ops.T_PhiA_M_N, ops.S_Phi_N

    TY = T_B.T @ Ybar
    TNW = betaN * (TN_B.T @ W22)
    Sc = TY @ T_B + TNW @ TN_B
    XC = 2.0 * (TY @ S_Phi + TNW @ SN)
    Mx = S_Phi.T @ Ybar @ S_Phi + betaN * (SN.T @ W22 @ SN)
    U_ey = TY
    U_zz1 = TY @ T_AM
    U_eN = betaN * (TN_B.T @ W21)
    U_zz2 = TNW @ TN_AM
    C_ee = Ybar
    C_ez = 2.0 * (Ybar @ T_AM)
    C_zz = T_AM.T @ Ybar @ T_AM
    C_eeN = betaN * W11
    C_ezN = 2.0 * betaN * (W12 @ TN_AM)
    C_zzN = betaN * (TN_AM.T @ W22 @ TN_AM)

    if Rbar is not None:
        # input penalty: u-stack = K(estimate stack) + c + L zeta
        E_u = np.eye(N * m.n_u) + ops.K_blk @ T_B
        KS = ops.K_blk @ S_Phi
        Q2 = ops.K_blk @ T_AM
        ER = E_u.T @ Rbar
        Sc = Sc + ER @ E_u
        XC = XC + 2.0 * (ER @ KS)
        Mx = Mx + KS.T @ Rbar @ KS
        U_zz1 = U_zz1 + ER @ Q2
        C_zz = C_zz + Q2.T @ Rbar @ Q2

    n_c = N * m.n_u
    row_idx = ops.free_idx % n_c
    col_idx = ops.free_idx // n_c
    return FormExpansion(
        ops=ops, Sc=Sc, XC=XC, Mx=Mx,
        U_ey=U_ey, U_zz1=U_zz1, U_eN=U_eN, U_zz2=U_zz2,
        C_ee=C_ee, C_ez=C_ez, C_zz=C_zz,
        C_eeN=C_eeN, C_ezN=C_ezN, C_zzN=C_zzN,
        noise=noise, row_idx=row_idx, col_idx=col_idx,
    )


_expansion_cache: WeakKeyDictionary = WeakKeyDictionary()


def get_expansions(ops: PredictionOperators,
                   maps: LyapunovMaps) -> tuple[FormExpansion, FormExpansion]:
    """(cost, constraint) expansions, cached per operator/maps pair."""
    per_ops = _expansion_cache.setdefault(ops, WeakKeyDictionary())
    pair = per_ops.get(maps)
    if pair is None:
        pair = (_expansion(ops, maps, "cost"), _expansion(ops, maps, "constraint"))
        per_ops[maps] = pair
    return pair


def assemble_cost(ops: PredictionOperators, maps: LyapunovMaps, Omega, Omega_N,
                  x_hat: np.ndarray) -> QuadraticForm:
    """Discounted expected cost as an explicit PSD quadratic in theta."""
    return get_expansions(ops, maps)[0].form(Omega, Omega_N, np.asarray(x_hat, float))


def assemble_constraint(ops: PredictionOperators, maps: LyapunovMaps, Omega,
                        Omega_N, x_hat: np.ndarray) -> QuadraticForm:
    """Discounted output-energy sum as an explicit PSD quadratic in theta."""
    return get_expansions(ops, maps)[1].form(Omega, Omega_N, np.asarray(x_hat, float))


def value_by_moments(ops: PredictionOperators, maps: LyapunovMaps, pol: Policy,
                     x_hat: np.ndarray, Omega, Omega_N, which: str = "cost") -> float:
    """Reference evaluation through the moment set and trace pairings.

    Independent of the expansion path: propagates moments for the given
    policy, then sums tr-pairings of the stacked second moments with the
    discounted weights and the dual terminal weight.
    """
    m, s = ops.model, ops.spec
    mom: MomentSet = compute_moments(ops, pol, np.asarray(x_hat, float), Omega, Omega_N)
    N, n_x = s.N, m.n_x
    ne = N * n_x
    if which == "cost":
        Ybar = _discount_diag(s.Q, s.beta, N)
        Wt = maps.W_cost_dual
        noise = maps.noise_const_cost
    else:
        Ybar = _discount_diag(s.H.T @ s.H, s.beta, N)
        Wt = maps.W_con_dual
        noise = maps.noise_const_con
    # state stack second moment: x = e + x_hat-part, all four X blocks pair with Ybar
    Xee = mom.X[:ne, :ne]
    Xex = mom.X[:ne, ne:]
    Xxx = mom.X[ne:, ne:]
    val = float(np.sum(Ybar * (Xee + Xex + Xex.T + Xxx)))
    if which == "cost":
        Rbar = _discount_diag(s.R, s.beta, N)
        val += float(np.sum(Rbar * mom.U2))
    val += (s.beta ** N) * float(np.sum(Wt * mom.X_N)) + noise
    return val


def assemble_by_probing(ops: PredictionOperators, maps: LyapunovMaps, Omega,
                        Omega_N, x_hat: np.ndarray,
                        which: str = "cost") -> QuadraticForm:
    """Reference quadratic form recovered by probing value_by_moments.

    Exact for a quadratic: Hessian from symmetric second differences on the
    coordinate basis, linear part from first differences.  Quadratic in the
    flattened theta, so n_theta + n_theta^2/2 evaluations; test-scale only.
    """
    n = ops.n_theta

    def val(theta):
        return value_by_moments(ops, maps, ops.unflatten_policy(theta),
                                x_hat, Omega, Omega_N, which)

    f0 = val(np.zeros(n))
    e = np.eye(n)
    fi = np.array([val(e[i]) for i in range(n)])
    fmi = np.array([val(-e[i]) for i in range(n)])
    diag = fi + fmi - 2.0 * f0
    lin = 0.5 * (fi - fmi)
    H = np.diag(diag)
    for i in range(n):
        for j in range(i + 1, n):
            fij = val(e[i] + e[j])
            H[i, j] = H[j, i] = (fij - f0 - lin[i] - lin[j]
                                 - 0.5 * (diag[i] + diag[j]))
    return QuadraticForm(Hess=H, lin=lin, const=f0)
