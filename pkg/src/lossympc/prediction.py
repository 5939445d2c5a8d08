"""Block prediction operators and exact predicted moments under packet loss.

Over the horizon the controller predicts with the fixed gains (K, M) plus an
affine innovation-feedback correction: the i-steps-ahead input is

    u_i = K x_hat_i + c_i + sum_{j<=i} L_{i,j} zeta_j,
    zeta_j = gamma_j (y_j - C x_hat_j),

so the estimate stack is linear in (c, L) while the estimation-error stack
e_i = x_i - x_hat_i and the innovation stack zeta are policy-independent.
Their joint second moment Omega is a loss-pattern average: conditioned on the
arrival pattern Gamma the pair (e-stack, zeta-stack) is linear in
(e_0, v-stack, w-stack), so

    Omega = sum_Gamma P{Gamma} [F;G](Gamma) blkdiag(Sigma, Sv_blk, Sw_blk)
                              [F;G](Gamma)'

which this module aggregates into a single precomputed operator on
vec(blkdiag(...)) so the per-step work is one matrix-vector product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ControlSpec, Gains, SystemModel


class HorizonTooLarge(Exception):
    """Pattern enumeration is exponential in N; refuse absurd horizons."""


@dataclass
class ErrorMoment:
    """Second moment of the estimation error x - x_hat."""

    Sigma: np.ndarray


@dataclass
class Policy:
    """Decision variable: perturbations c and innovation gains L.

    c stacks the N per-stage input perturbations.  L is stored dense of shape
    (N*n_u, N*n_y) with all blocks above the block diagonal identically zero;
    stages at or beyond the horizon carry no decision (implicit zeros).
    """

    c: np.ndarray
    L: np.ndarray


@dataclass
class MomentSet:
    """First/second moments of predicted estimate, state, and input stacks."""

    pi: np.ndarray
    Pi: np.ndarray
    Omega: np.ndarray
    X: np.ndarray
    pi_N: np.ndarray
    Pi_N: np.ndarray
    Omega_N: np.ndarray
    X_N: np.ndarray
    U2: np.ndarray


@dataclass(eq=False)
class PredictionOperators:
    """Offline-precomputable block operators for one (model, gains, horizon).

    The Gamma-dependent stack maps are aggregated over all 2^N arrival
    patterns into omega_kron / omega_kron_N (see compute_omega).  noise_const
    is the discounted tail noise-injection matrix
    beta^(N+1)/(1-beta) * E{Dt(gamma) blkdiag(Sigma_v, Sigma_w) Dt(gamma)'}
    for the joint (error, estimate) tail dynamics.
    """

    model: SystemModel
    gains: Gains
    spec: ControlSpec
    S_Phi: np.ndarray
    T_PhiB: np.ndarray
    T_PhiA_M: np.ndarray
    S_Phi_N: np.ndarray
    T_PhiB_N: np.ndarray
    T_PhiA_M_N: np.ndarray
    K_blk: np.ndarray
    M_blk: np.ndarray
    C_blk: np.ndarray
    gamma_patterns: list
    omega_kron: np.ndarray
    omega_kron_N: np.ndarray
    noise_const: np.ndarray
    free_idx: np.ndarray
    pattern_stacks: list = field(repr=False, default_factory=list)

    @property
    def N(self) -> int:
        return self.spec.N

    @property
    def n_theta(self) -> int:
        return self.spec.N * self.model.n_u + self.free_idx.size

    def zero_policy(self) -> Policy:
        N, n_u, n_y = self.spec.N, self.model.n_u, self.model.n_y
        return Policy(c=np.zeros(N * n_u), L=np.zeros((N * n_u, N * n_y)))

    def flatten_policy(self, p: Policy) -> np.ndarray:
        return np.concatenate([p.c, p.L.ravel(order="F")[self.free_idx]])

    def unflatten_policy(self, theta: np.ndarray) -> Policy:
        N, n_u, n_y = self.spec.N, self.model.n_u, self.model.n_y
        c = np.array(theta[: N * n_u])
        Lv = np.zeros(N * n_u * N * n_y)
        Lv[self.free_idx] = theta[N * n_u:]
        return Policy(c=c, L=Lv.reshape((N * n_u, N * n_y), order="F"))


def tail_noise_matrix(m: SystemModel, g: Gains, s: ControlSpec) -> np.ndarray:
    """Discounted noise-injection constant of the joint (e, x_hat) tail dynamics.

    Beyond the horizon the pair evolves as
        e+     = Psi(gamma) e - gamma A M v + D w
        x_hat+ = Phi x_hat + gamma A M (C e + v)
    so the per-step noise input has loss-averaged second moment with blocks
    built from A M Sigma_v M'A' and D Sigma_w D'.  The geometric tail weight
    beta^(N+1)/(1-beta) is folded in.
    """
    AM = m.A @ g.M
    Svv = AM @ m.Sigma_v @ AM.T
    Sww = m.D @ m.Sigma_w @ m.D.T
    lam = m.lam
    return np.block([
        [lam * Svv + Sww, -lam * Svv],
        [-lam * Svv, lam * Svv],
    ]) * (s.beta ** (s.N + 1) / (1.0 - s.beta))


def _causal_block(blocks: list, N: int, n_r: int, n_c: int) -> np.ndarray:
    """Assemble T with T[i, j] = blocks[i][j] for j < i, zero elsewhere."""
    T = np.zeros((N * n_r, N * n_c))
    for i in range(N):
        for j in range(i):
            T[i * n_r:(i + 1) * n_r, j * n_c:(j + 1) * n_c] = blocks[i][j]
    return T


def build_operators(m: SystemModel, g: Gains, s: ControlSpec,
                    max_horizon: int = 12) -> PredictionOperators:
    """Assemble every block operator for horizon N plus the pattern aggregates.

    Raises:
        HorizonTooLarge: N exceeds the enumeration cap (default 12).
    """
    N = s.N
    if N > max_horizon:
        raise HorizonTooLarge(f"N={N} exceeds the 2^N enumeration cap ({max_horizon})")
    n_x, n_u, n_y, n_w = m.n_x, m.n_u, m.n_y, m.n_w
    A, B, C, D = m.A, m.B, m.C, m.D
    Phi = A + B @ g.K
    AM = A @ g.M

    # powers of Phi up to N
    Phi_pow = [np.eye(n_x)]
    for _ in range(N):
        Phi_pow.append(Phi @ Phi_pow[-1])

    S_Phi = np.vstack([Phi_pow[i] for i in range(N)])
    T_PhiB = _causal_block(
        [[Phi_pow[i - 1 - j] @ B for j in range(i)] for i in range(N)], N, n_x, n_u)
    T_PhiA_M = _causal_block(
        [[Phi_pow[i - 1 - j] @ AM for j in range(i)] for i in range(N)], N, n_x, n_y)
    S_Phi_N = Phi_pow[N]
    T_PhiB_N = np.hstack([Phi_pow[N - 1 - j] @ B for j in range(N)])
    T_PhiA_M_N = np.hstack([Phi_pow[N - 1 - j] @ AM for j in range(N)])

    K_blk = np.kron(np.eye(N), g.K)
    M_blk = np.kron(np.eye(N), g.M)
    C_blk = np.kron(np.eye(N), C)

    Psi = [A @ (np.eye(n_x) - gamma * (g.M @ C)) for gamma in (0, 1)]

    n_in = n_x + N * n_y + N * n_w
    sel_v = slice(n_x, n_x + N * n_y)
    sel_w = slice(n_x + N * n_y, n_in)

    gamma_patterns = []
    pattern_stacks = []
    omega_kron = np.zeros(((N * (n_x + n_y)) ** 2, n_in ** 2))
    omega_kron_N = np.zeros(((n_x + N * n_y) ** 2, n_in ** 2))
    for code in range(2 ** N):
        gam = np.array([(code >> i) & 1 for i in range(N)], dtype=float)
        ones = int(gam.sum())
        prob = m.lam ** ones * (1.0 - m.lam) ** (N - ones)
        gamma_patterns.append((gam, prob))

        # error rows: e_i = prod(i,-1) e0 + sum_{j<i} prod(i,j) (-gam_j AM v_j + D w_j)
        # prod(i,j) = Psi_{i-1} ... Psi_{j+1}
        F = np.zeros((N * n_x, n_in))
        FN_row = np.zeros((n_x, n_in))
        # walk i upward, reusing e_{i} rows: row(i+1) = Psi_i @ row(i) + injection
        row = np.zeros((n_x, n_in))
        row[:, :n_x] = np.eye(n_x)
        for i in range(N + 1):
            if i < N:
                F[i * n_x:(i + 1) * n_x] = row
            else:
                FN_row = row
            if i < N:
                nxt = Psi[int(gam[i])] @ row
                nxt[:, n_x + i * n_y:n_x + (i + 1) * n_y] += -gam[i] * AM
                nxt[:, n_x + N * n_y + i * n_w:n_x + N * n_y + (i + 1) * n_w] += D
                row = nxt

        G = C_blk @ F
        G[:, sel_v] += np.eye(N * n_y)
        G = np.repeat(gam, n_y)[:, None] * G

        M_full = np.vstack([F, G])
        M_term = np.vstack([FN_row, G])
        pattern_stacks.append((prob, M_full, M_term))
        omega_kron += prob * np.kron(M_full, M_full)
        omega_kron_N += prob * np.kron(M_term, M_term)

    noise_const = tail_noise_matrix(m, g, s)

    # free (block lower-triangular) entries of L in column-major order
    mask = np.zeros((N * n_u, N * n_y), dtype=bool)
    for bi in range(N):
        for bj in range(bi + 1):
            mask[bi * n_u:(bi + 1) * n_u, bj * n_y:(bj + 1) * n_y] = True
    free_idx = np.flatnonzero(mask.ravel(order="F"))

    return PredictionOperators(
        model=m, gains=g, spec=s,
        S_Phi=S_Phi, T_PhiB=T_PhiB, T_PhiA_M=T_PhiA_M,
        S_Phi_N=S_Phi_N, T_PhiB_N=T_PhiB_N, T_PhiA_M_N=T_PhiA_M_N,
        K_blk=K_blk, M_blk=M_blk, C_blk=C_blk,
        gamma_patterns=gamma_patterns,
        omega_kron=omega_kron, omega_kron_N=omega_kron_N,
        noise_const=noise_const, free_idx=free_idx,
        pattern_stacks=pattern_stacks,
    )


def _sigma_of(Sigma) -> np.ndarray:
    return Sigma.Sigma if isinstance(Sigma, ErrorMoment) else np.asarray(Sigma, float)


def _noise_blockdiag(ops: PredictionOperators, Sigma: np.ndarray) -> np.ndarray:
    m, N = ops.model, ops.spec.N
    n_in = m.n_x + N * m.n_y + N * m.n_w
    S = np.zeros((n_in, n_in))
    S[:m.n_x, :m.n_x] = Sigma
    iv = m.n_x
    S[iv:iv + N * m.n_y, iv:iv + N * m.n_y] = np.kron(np.eye(N), m.Sigma_v)
    iw = iv + N * m.n_y
    S[iw:, iw:] = np.kron(np.eye(N), m.Sigma_w)
    return S


def compute_omega(ops: PredictionOperators, Sigma) -> tuple[np.ndarray, np.ndarray]:
    """Joint second moments of (error stack, innovation stack) via the aggregate.

    Returns (Omega, Omega_N): Omega couples the N error blocks with the N
    innovation blocks; Omega_N replaces the error stack by the terminal error.
    """
    S = _noise_blockdiag(ops, _sigma_of(Sigma))
    vecS = S.ravel(order="F")
    n1 = int(np.sqrt(ops.omega_kron.shape[0]))
    n2 = int(np.sqrt(ops.omega_kron_N.shape[0]))
    Omega = (ops.omega_kron @ vecS).reshape((n1, n1), order="F")
    Omega_N = (ops.omega_kron_N @ vecS).reshape((n2, n2), order="F")
    return 0.5 * (Omega + Omega.T), 0.5 * (Omega_N + Omega_N.T)


def omega_by_enumeration(ops: PredictionOperators, Sigma) -> tuple[np.ndarray, np.ndarray]:
    """Reference path: explicit sum over all 2^N arrival patterns."""
    S = _noise_blockdiag(ops, _sigma_of(Sigma))
    Omega = sum(p * Mf @ S @ Mf.T for p, Mf, _ in ops.pattern_stacks)
    Omega_N = sum(p * Mt @ S @ Mt.T for p, _, Mt in ops.pattern_stacks)
    return 0.5 * (Omega + Omega.T), 0.5 * (Omega_N + Omega_N.T)


@dataclass
class OmegaAffine:
    """Moment aggregates as affine functions of the error covariance."""
    base: np.ndarray
    base_N: np.ndarray
    lin: np.ndarray
    lin_N: np.ndarray

    def eval(self, Sigma) -> tuple[np.ndarray, np.ndarray]:
        s = _sigma_of(Sigma).ravel(order="F")
        n1, n2 = self.base.shape[0], self.base_N.shape[0]
        Om = self.base + (self.lin @ s).reshape((n1, n1), order="F")
        OmN = self.base_N + (self.lin_N @ s).reshape((n2, n2), order="F")
        return 0.5 * (Om + Om.T), 0.5 * (OmN + OmN.T)


def omega_affine_map(ops: PredictionOperators) -> OmegaAffine:
    """Split compute_omega into a constant part plus a linear map of Sigma.

    Only the leading block of the stacked noise covariance carries Sigma,
    so repeated closed-loop evaluations reduce to one small matvec.
    """
    m = ops.model
    n_in = m.n_x + ops.spec.N * m.n_y + ops.spec.N * m.n_w
    ii = np.tile(np.arange(m.n_x), m.n_x)
    jj = np.repeat(np.arange(m.n_x), m.n_x)
    cols = jj * n_in + ii
    v0 = _noise_blockdiag(ops, np.zeros((m.n_x, m.n_x))).ravel(order="F")
    n1 = int(np.sqrt(ops.omega_kron.shape[0]))
    n2 = int(np.sqrt(ops.omega_kron_N.shape[0]))
    return OmegaAffine(
        base=(ops.omega_kron @ v0).reshape((n1, n1), order="F"),
        base_N=(ops.omega_kron_N @ v0).reshape((n2, n2), order="F"),
        lin=np.ascontiguousarray(ops.omega_kron[:, cols]),
        lin_N=np.ascontiguousarray(ops.omega_kron_N[:, cols]),
    )


def compute_moments(ops: PredictionOperators, theta: Policy, x_hat: np.ndarray,
                    Omega: np.ndarray, Omega_N: np.ndarray) -> MomentSet:
    """Exact first/second moments of the predicted stacks under policy theta."""
    N, n_x = ops.spec.N, ops.model.n_x
    ne = N * n_x
    pi = ops.S_Phi @ x_hat + ops.T_PhiB @ theta.c
    Pi = ops.T_PhiB @ theta.L + ops.T_PhiA_M

    O_ee, O_ez, O_zz = Omega[:ne, :ne], Omega[:ne, ne:], Omega[ne:, ne:]
    X = np.block([
        [O_ee, O_ez @ Pi.T],
        [Pi @ O_ez.T, np.outer(pi, pi) + Pi @ O_zz @ Pi.T],
    ])

    u_bar = ops.K_blk @ pi + theta.c
    S_u = theta.L + ops.K_blk @ Pi
    U2 = np.outer(u_bar, u_bar) + S_u @ O_zz @ S_u.T

    pi_N = ops.S_Phi_N @ x_hat + ops.T_PhiB_N @ theta.c
    Pi_N = ops.T_PhiB_N @ theta.L + ops.T_PhiA_M_N
    ON_ee, ON_ez, ON_zz = Omega_N[:n_x, :n_x], Omega_N[:n_x, n_x:], Omega_N[n_x:, n_x:]
    X_N = np.block([
        [ON_ee, ON_ez @ Pi_N.T],
        [Pi_N @ ON_ez.T, np.outer(pi_N, pi_N) + Pi_N @ ON_zz @ Pi_N.T],
    ])

    return MomentSet(
        pi=pi, Pi=Pi, Omega=Omega, X=0.5 * (X + X.T),
        pi_N=pi_N, Pi_N=Pi_N, Omega_N=Omega_N, X_N=0.5 * (X_N + X_N.T),
        U2=0.5 * (U2 + U2.T),
    )


def sigma_update(m: SystemModel, g: Gains, Sigma, gamma: int):
    """One-step error second-moment recursion with the realized arrival bit."""
    S = _sigma_of(Sigma)
    Psi = m.A @ (np.eye(m.n_x) - gamma * (g.M @ m.C))
    AM = m.A @ g.M
    S_next = Psi @ S @ Psi.T + gamma * (AM @ m.Sigma_v @ AM.T) + m.D @ m.Sigma_w @ m.D.T
    S_next = 0.5 * (S_next + S_next.T)
    return ErrorMoment(S_next) if isinstance(Sigma, ErrorMoment) else S_next


def expected_stage_constraint(H: np.ndarray, x_hat: np.ndarray, Sigma) -> float:
    """E{||H x||^2} for x with mean x_hat and error second moment Sigma."""
    S = _sigma_of(Sigma)
    Hx = H @ x_hat
    return float(Hx @ Hx + np.trace(H.T @ H @ S))
