"""Plant description, cost weights, and fixed-gain synthesis.

The plant is linear with additive process and measurement noise,

    x+ = A x + B u + D w,    w ~ (0, Sigma_w)
    y  = C x + v,            v ~ (0, Sigma_v)

and the measurement packet reaches the controller only when an i.i.d.
Bernoulli arrival indicator gamma fires, P{gamma = 1} = lam.  The controller
keeps a fixed feedback gain K for the estimate and a fixed filter gain M for
the (intermittent) innovation correction.  This module synthesizes both gains
and certifies the spectral conditions the rest of the toolkit relies on:

    rho_phi  : spectral radius of Phi = A + B K
    rho_ms   : spectral radius of the loss-averaged second-moment map of the
               estimation error, (1-lam) Psi0 (x) Psi0 + lam Psi1 (x) Psi1
               with Psi(gamma) = A (I - gamma M C)
    rho_lyap : same construction for the joint (error, estimate) dynamics,
               scaled by the discount factor beta
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ModelError(Exception):
    """Base class for model validation and synthesis failures."""


class DimensionMismatch(ModelError):
    pass


class NotPSD(ModelError):
    pass


class NotStabilizable(ModelError):
    pass


class NotDetectable(ModelError):
    pass


class RiccatiDiverged(ModelError):
    pass


_RANK_TOL = 1e-9       # PBH rank decisions on singular values
_FP_TOL = 1e-12        # fixed-point tolerance, relative to matrix scale
_FP_CAP = 10**6        # iteration cap for Riccati fixed points


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be a 2-d matrix, got shape {a.shape}")
    return a


@dataclass
class SystemModel:
    """Plant matrices, noise covariances, and the packet arrival probability."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Sigma_w: np.ndarray
    Sigma_v: np.ndarray
    lam: float

    def __post_init__(self):
        self.A = _as_matrix(self.A, "A")
        self.B = _as_matrix(self.B, "B")
        self.C = _as_matrix(self.C, "C")
        self.D = _as_matrix(self.D, "D")
        self.Sigma_w = _as_matrix(self.Sigma_w, "Sigma_w")
        self.Sigma_v = _as_matrix(self.Sigma_v, "Sigma_v")
        self.lam = float(self.lam)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def n_w(self) -> int:
        return self.D.shape[1]


@dataclass
class ControlSpec:
    """Cost weights, discount, constraint output and budget, horizon."""

    Q: np.ndarray
    R: np.ndarray
    H: np.ndarray
    beta: float
    epsilon: float
    N: int

    def __post_init__(self):
        self.Q = _as_matrix(self.Q, "Q")
        self.R = _as_matrix(self.R, "R")
        self.H = _as_matrix(self.H, "H")
        self.beta = float(self.beta)
        self.epsilon = float(self.epsilon)
        self.N = int(self.N)


@dataclass
class InitialBelief:
    """Mean and second moment of the initial estimation error."""

    x_hat0: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        self.x_hat0 = np.asarray(self.x_hat0, dtype=float).reshape(-1)
        self.Sigma0 = _as_matrix(self.Sigma0, "Sigma0")


@dataclass
class Gains:
    """Synthesized gains together with their stability certificates."""

    K: np.ndarray
    M: np.ndarray
    rho_phi: float
    rho_ms: float
    rho_lyap: float


def _check_psd(S: np.ndarray, name: str, strict: bool = False) -> None:
    if not np.allclose(S, S.T, atol=1e-10):
        raise NotPSD(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(0.5 * (S + S.T))
    if w.size == 0:
        return
    floor = -1e-10 * max(1.0, float(np.abs(w).max()))
    if strict:
        if w.min() <= 0.0:
            raise NotPSD(f"{name} must be positive definite (min eig {w.min():.3e})")
    elif w.min() < floor:
        raise NotPSD(f"{name} has negative eigenvalue {w.min():.3e}")


def _pbh_ok(A: np.ndarray, B: np.ndarray) -> bool:
    # rank [sI - A, B] = n for every eigenvalue s of A with |s| >= 1
    n = A.shape[0]
    for s in np.linalg.eigvals(A):
        if abs(s) < 1.0 - _RANK_TOL:
            continue
        M = np.hstack([s * np.eye(n) - A, B.astype(complex)])
        sv = np.linalg.svd(M, compute_uv=False)
        if sv[-1] <= _RANK_TOL * sv[0]:
            return False
    return True


def validate_model(m: SystemModel, s: ControlSpec) -> tuple[SystemModel, ControlSpec]:
    """Check dimensions, covariance definiteness, and the two PBH conditions.

    Raises:
        DimensionMismatch: inconsistent matrix shapes or parameter ranges.
        NotPSD: a covariance or weight fails its (semi)definiteness requirement.
        NotStabilizable: (A, B) fails the PBH test on unstable eigenvalues.
        NotDetectable: (A, C) fails the dual PBH test.
    """
    n_x = m.A.shape[0]
    if m.A.shape != (n_x, n_x):
        raise DimensionMismatch(f"A must be square, got {m.A.shape}")
    if m.B.shape[0] != n_x:
        raise DimensionMismatch(f"B row count {m.B.shape[0]} != n_x {n_x}")
    if m.C.shape[1] != n_x:
        raise DimensionMismatch(f"C column count {m.C.shape[1]} != n_x {n_x}")
    if m.D.shape[0] != n_x:
        raise DimensionMismatch(f"D row count {m.D.shape[0]} != n_x {n_x}")
    if m.Sigma_w.shape != (m.n_w, m.n_w):
        raise DimensionMismatch(f"Sigma_w shape {m.Sigma_w.shape} != ({m.n_w}, {m.n_w})")
    if m.Sigma_v.shape != (m.n_y, m.n_y):
        raise DimensionMismatch(f"Sigma_v shape {m.Sigma_v.shape} != ({m.n_y}, {m.n_y})")
    if not 0.0 <= m.lam <= 1.0:
        raise DimensionMismatch(f"lam must lie in [0, 1], got {m.lam}")
    if s.Q.shape != (n_x, n_x):
        raise DimensionMismatch(f"Q shape {s.Q.shape} != ({n_x}, {n_x})")
    if s.R.shape != (m.n_u, m.n_u):
        raise DimensionMismatch(f"R shape {s.R.shape} != ({m.n_u}, {m.n_u})")
    if s.H.shape[1] != n_x:
        raise DimensionMismatch(f"H column count {s.H.shape[1]} != n_x {n_x}")
    if not 0.0 < s.beta < 1.0:
        raise DimensionMismatch(f"beta must lie strictly in (0, 1), got {s.beta}")
    if s.epsilon <= 0.0:
        raise DimensionMismatch(f"epsilon must be positive, got {s.epsilon}")
    if s.N < 1:
        raise DimensionMismatch(f"horizon N must be >= 1, got {s.N}")
    _check_psd(m.Sigma_w, "Sigma_w")
    _check_psd(m.Sigma_v, "Sigma_v", strict=True)
    _check_psd(s.Q, "Q")
    _check_psd(s.R, "R", strict=True)
    if not _pbh_ok(m.A, m.B):
        raise NotStabilizable("(A, B) fails the PBH rank test on |eig| >= 1")
    if not _pbh_ok(m.A.T, m.C.T):
        raise NotDetectable("(A, C) fails the PBH rank test on |eig| >= 1")
    return m, s


def synthesize_K(m: SystemModel, s: ControlSpec) -> np.ndarray:
    """Stationary LQ feedback gain for (A, B, Q, R) by Riccati fixed point.

    Iterates P <- A'PA - A'PB (R + B'PB)^-1 B'PA + Q until the update is
    below 1e-12 relative to the scale of P, then returns
    K = -(R + B'PB)^-1 B'PA.

    Raises:
        RiccatiDiverged: the iteration exceeds its cap or P blows up.
    """
    A, B, Q, R = m.A, m.B, s.Q, s.R
    P = Q.copy()
    for _ in range(_FP_CAP):
        BtP = B.T @ P
        G = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = A.T @ P @ A - (A.T @ P @ B) @ G + Q
        P_next = 0.5 * (P_next + P_next.T)
        delta = np.abs(P_next - P).max()
        P = P_next
        if not np.isfinite(delta) or np.abs(P).max() > 1e12:
            raise RiccatiDiverged("control Riccati iteration blew up")
        if delta <= _FP_TOL * max(1.0, np.abs(P).max()):
            BtP = B.T @ P
            return -np.linalg.solve(R + BtP @ B, BtP @ A)
    raise RiccatiDiverged(f"control Riccati not converged in {_FP_CAP} iterations")


def synthesize_M(m: SystemModel) -> np.ndarray:
    """Filter gain from the arrival-modified estimation Riccati equation.

    Iterates the error second-moment fixed point

        Sb <- A Sb A' + D Sigma_w D' - lam A Sb C'(C Sb C' + Sigma_v)^-1 C Sb A'

    and returns M = Sb C'(C Sb C' + Sigma_v)^-1.  Divergence of the iteration
    signals an arrival probability below the critical value for bounded
    estimation error.
    """
    A, C, D = m.A, m.C, m.D
    W = D @ m.Sigma_w @ D.T
    Sb = W.copy()
    for _ in range(_FP_CAP):
        SC = Sb @ C.T
        G = np.linalg.solve(C @ SC + m.Sigma_v, SC.T @ A.T)
        Sb_next = A @ Sb @ A.T + W - m.lam * (A @ SC) @ G
        Sb_next = 0.5 * (Sb_next + Sb_next.T)
        delta = np.abs(Sb_next - Sb).max()
        Sb = Sb_next
        if not np.isfinite(delta) or np.abs(Sb).max() > 1e12:
            raise RiccatiDiverged("estimation Riccati blew up; lam below critical value")
        if delta <= _FP_TOL * max(1.0, np.abs(Sb).max()):
            SC = Sb @ C.T
            return SC @ np.linalg.inv(C @ SC + m.Sigma_v)
    raise RiccatiDiverged(f"estimation Riccati not converged in {_FP_CAP} iterations")


def error_map(m: SystemModel, M: np.ndarray, gamma: int) -> np.ndarray:
    """Closed-loop estimation-error map Psi(gamma) = A (I - gamma M C)."""
    n = m.n_x
    return m.A @ (np.eye(n) - gamma * (M @ m.C))


def joint_map(m: SystemModel, K: np.ndarray, M: np.ndarray, gamma: int) -> np.ndarray:
    """Joint (error, estimate) map: block lower-triangular in (e, x_hat)."""
    n = m.n_x
    Phi = m.A + m.B @ K
    top = np.hstack([error_map(m, M, gamma), np.zeros((n, n))])
    bot = np.hstack([gamma * (m.A @ M @ m.C), Phi])
    return np.vstack([top, bot])


def _loss_averaged_radius(M0: np.ndarray, M1: np.ndarray, lam: float) -> float:
    lifted = (1.0 - lam) * np.kron(M0, M0) + lam * np.kron(M1, M1)
    return float(np.abs(np.linalg.eigvals(lifted)).max())


def check_ms_stability(m: SystemModel, M: np.ndarray) -> float:
    """Spectral radius of the loss-averaged error second-moment map.

    The certificate passes iff the returned radius is < 1.
    """
    return _loss_averaged_radius(error_map(m, M, 0), error_map(m, M, 1), m.lam)


def check_discounted_lyapunov(m: SystemModel, g: Gains, beta: float) -> float:
    """Discounted radius of the joint second-moment map; must be < 1."""
    return beta * _loss_averaged_radius(
        joint_map(m, g.K, g.M, 0), joint_map(m, g.K, g.M, 1), m.lam
    )


def synthesize_gains(m: SystemModel, s: ControlSpec) -> Gains:
    """Synthesize (K, M) and attach all three stability radii."""
    K = synthesize_K(m, s)
    M = synthesize_M(m)
    rho_phi = float(np.abs(np.linalg.eigvals(m.A + m.B @ K)).max())
    g = Gains(K=K, M=M, rho_phi=rho_phi, rho_ms=check_ms_stability(m, M), rho_lyap=0.0)
    g.rho_lyap = check_discounted_lyapunov(m, g, s.beta)
    return g
