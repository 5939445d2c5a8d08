"""Test utilities: random well-posed instances and PSD sampling helpers."""

import numpy as np

from lossympc.assembly import get_expansions
from lossympc.controller import tail_policy
from lossympc.model import ControlSpec, SystemModel, synthesize_gains, validate_model
from lossympc.prediction import build_operators, compute_omega, sigma_update


def psd_factor(S: np.ndarray) -> np.ndarray:
    """G with G G' = S for PSD S (eigenvalue route, negatives clipped)."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def random_psd(rng, n: int, scale: float = 1.0) -> np.ndarray:
    G = rng.normal(size=(n, n))
    return scale * (G @ G.T) / n


def random_instance(seed: int, n_x: int = 2, n_u: int = 1, n_y: int = 1,
                    n_w: int = 1, N: int = 3, lam: float | None = None,
                    beta: float | None = None):
    """A random mean-square-well-posed instance with synthesized gains.

    Spectral radius of A is drawn in [0.6, 0.95] so every arrival probability
    keeps the loss-averaged certificates valid.
    """
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n_x, n_x))
    A *= rng.uniform(0.6, 0.95) / max(np.abs(np.linalg.eigvals(A)).max(), 1e-9)
    B = rng.normal(size=(n_x, n_u))
    C = rng.normal(size=(n_y, n_x))
    D = rng.normal(size=(n_x, n_w))
    m = SystemModel(
        A=A, B=B, C=C, D=D,
        Sigma_w=random_psd(rng, n_w, scale=rng.uniform(0.2, 1.0)),
        Sigma_v=random_psd(rng, n_y) + 0.1 * np.eye(n_y),
        lam=lam if lam is not None else rng.uniform(0.4, 0.9),
    )
    s = ControlSpec(
        Q=random_psd(rng, n_x) + 0.05 * np.eye(n_x),
        R=random_psd(rng, n_u) + 0.1 * np.eye(n_u),
        H=rng.normal(size=(1, n_x)),
        beta=beta if beta is not None else rng.uniform(0.8, 0.95),
        epsilon=1.0,
        N=N,
    )
    validate_model(m, s)
    g = synthesize_gains(m, s)
    ops = build_operators(m, g, s)
    return m, s, g, ops


def random_policy(rng, ops):
    """Random admissible policy: dense c, block-lower-triangular L."""
    p = ops.zero_policy()
    p.c = rng.normal(size=p.c.shape)
    theta = np.concatenate([p.c, rng.normal(size=ops.free_idx.size)])
    return ops.unflatten_policy(theta)


def one_step_draws(ops, maps, x_hat, Sigma, theta_star, rng, n):
    """Sample one-step closed-loop outcomes at a fixed plan.

    Draws (gamma, e, v) jointly, forms the applied input, the posterior
    estimate, and the shifted policy for each draw, and evaluates the
    next-step cost and constraint forms at that policy.  The disturbance
    w never enters: estimate and budget depend only on the innovation.
    Returns per-draw arrays keyed gamma / stage_cost / stage_con /
    mu_next / J_tail.
    """
    m, s = ops.model, ops.spec
    cexp, kexp = get_expansions(ops, maps)
    S = Sigma.Sigma if hasattr(Sigma, "Sigma") else np.asarray(Sigma, float)
    Ge, Gv = psd_factor(S), psd_factor(m.Sigma_v)
    x_hat = np.asarray(x_hat, float)
    n_u, n_y = m.n_u, m.n_y

    gammas = (rng.random(n) < m.lam).astype(int)
    e = Ge @ rng.standard_normal((m.n_x, n))
    v = Gv @ rng.standard_normal((m.n_y, n))
    zeta = (m.C @ e + v) * gammas

    u0 = ops.gains.K @ x_hat + theta_star.c[:n_u]
    u = u0[:, None] + theta_star.L[:n_u, :n_y] @ zeta
    x_true = x_hat[:, None] + e
    stage_cost = (np.einsum("is,is->s", x_true, s.Q @ x_true)
                  + np.einsum("is,is->s", u, s.R @ u))
    Hx = s.H @ x_true
    stage_con = np.einsum("is,is->s", Hx, Hx)

    xh_next = (m.A @ x_hat + m.B @ u0)[:, None] \
        + (m.B @ theta_star.L[:n_u, :n_y] + m.A @ ops.gains.M) @ zeta

    # the shifted policy varies per draw only through its perturbations
    tail0 = tail_policy(ops, theta_star, 0, None)
    c_shift = np.tile(tail0.c[:, None], (1, n))
    if s.N > 1:
        c_shift[:-n_u] += theta_star.L[n_u:, :n_y] @ zeta

    mu_next, J_tail = np.empty(n), np.empty(n)
    for bit in (0, 1):
        idx = np.flatnonzero(gammas == bit)
        if idx.size == 0:
            continue
        Om, OmN = compute_omega(ops, sigma_update(m, ops.gains, S, bit))
        args = (Om, OmN, xh_next[:, idx], c_shift[:, idx], tail0.L)
        mu_next[idx] = kexp.value_batch(*args)
        J_tail[idx] = cexp.value_batch(*args)
    return dict(gamma=gammas, stage_cost=stage_cost, stage_con=stage_con,
                mu_next=mu_next, J_tail=J_tail)


def one_step_expected(ops, maps, x_hat, Sigma, theta_star):
    """Exact one-step means of the shifted-policy budget and tail cost.

    Mixes the two delivery outcomes and integrates the innovation with
    sigma points, which is exact here because both forms are quadratic in
    the estimate and in the policy offset.  Returns (mu_mean, J_mean)
    with no sampling error, so it also serves as a reference for the
    Monte Carlo sampler above.
    """
    m, s = ops.model, ops.spec
    cexp, kexp = get_expansions(ops, maps)
    S = Sigma.Sigma if hasattr(Sigma, "Sigma") else np.asarray(Sigma, float)
    x_hat = np.asarray(x_hat, float)
    n_u, n_y = m.n_u, m.n_y

    u0 = ops.gains.K @ x_hat + theta_star.c[:n_u]
    a = m.A @ x_hat + m.B @ u0
    A1 = m.B @ theta_star.L[:n_u, :n_y] + m.A @ ops.gains.M

    tail0 = tail_policy(ops, theta_star, 0, None)
    Bc = np.zeros((tail0.c.size, n_y))
    if s.N > 1:
        Bc[:-n_u] = theta_star.L[n_u:, :n_y]

    Gz = psd_factor(m.C @ S @ m.C.T + m.Sigma_v)
    pts = np.concatenate([np.zeros((n_y, 1)), Gz, -Gz], axis=1)
    wts = np.concatenate([[1.0 - n_y], np.full(2 * n_y, 0.5)])

    mu_mean = J_mean = 0.0
    for bit, prob in ((0, 1.0 - m.lam), (1, m.lam)):
        Om, OmN = compute_omega(ops, sigma_update(m, ops.gains, S, bit))
        if bit == 0:
            xc, cc, w = a[:, None], tail0.c[:, None], np.ones(1)
        else:
            xc, cc, w = a[:, None] + A1 @ pts, tail0.c[:, None] + Bc @ pts, wts
        mu_mean += prob * (kexp.value_batch(Om, OmN, xc, cc, tail0.L) @ w)
        J_mean += prob * (cexp.value_batch(Om, OmN, xc, cc, tail0.L) @ w)
    return float(mu_mean), float(J_mean)


def expected_stage(ops, x_hat, Sigma, theta_star):
    """Closed-form means of the first stage cost and constraint."""
    m, s = ops.model, ops.spec
    S = Sigma.Sigma if hasattr(Sigma, "Sigma") else np.asarray(Sigma, float)
    x_hat = np.asarray(x_hat, float)
    n_u, n_y = m.n_u, m.n_y
    u0 = ops.gains.K @ x_hat + theta_star.c[:n_u]
    L00 = theta_star.L[:n_u, :n_y]
    Sz = m.C @ S @ m.C.T + m.Sigma_v
    cost = (float(x_hat @ (s.Q @ x_hat)) + float(np.trace(s.Q @ S))
            + float(u0 @ (s.R @ u0))
            + m.lam * float(np.trace(L00.T @ s.R @ L00 @ Sz)))
    Hx = s.H @ x_hat
    con = float(Hx @ Hx) + float(np.trace(s.H.T @ s.H @ S))
    return cost, con
