"""Terminal elimination and quadratic-form assembly checks.

The analytic expansion is validated three independent ways: against the
moment-propagation trace evaluation, against coordinate probing of that
evaluation, and against the explicit terminal-moment solve (no dual weights).
"""

import numpy as np
import pytest

from lossympc.assembly import (
    LyapunovIllPosed,
    QuadraticForm,
    assemble_by_probing,
    assemble_constraint,
    assemble_cost,
    build_lyapunov_maps,
    evaluate_form,
    get_expansions,
    solve_terminal_lyapunov,
    value_by_moments,
)
from lossympc.model import (
    ControlSpec,
    DimensionMismatch,
    Gains,
    SystemModel,
    synthesize_gains,
)
from lossympc.prediction import (
    build_operators,
    compute_moments,
    compute_omega,
    tail_noise_matrix,
)

from helpers import random_instance, random_policy, random_psd


@pytest.fixture(scope="module")
def small():
    m, s, g, ops = random_instance(seed=3, n_x=3, n_u=2, n_y=2, n_w=3, N=3)
    return m, s, g, ops, build_lyapunov_maps(m, g, s)


@pytest.fixture(scope="module")
def pendulum_setup(pendulum_model, pendulum_spec, pendulum_gains):
    ops = build_operators(pendulum_model, pendulum_gains, pendulum_spec)
    maps = build_lyapunov_maps(pendulum_model, pendulum_gains, pendulum_spec)
    return pendulum_model, pendulum_spec, pendulum_gains, ops, maps


def _cost_weight(s, g):
    KRK = g.K.T @ s.R @ g.K
    return np.block([[s.Q, s.Q], [s.Q, s.Q + KRK]])


def _con_weight(s):
    HtH = s.H.T @ s.H
    return np.block([[HtH, HtH], [HtH, HtH]])


class TestLyapunovMaps:
    def test_decoupled_zero_plant_gives_identity_map(self):
        # A = 0, B = 0: the closed-loop joint map vanishes, so the dual
        # weight equals the stage weight and the lifted inverse is I.
        n = 2
        m = SystemModel(A=np.zeros((n, n)), B=np.zeros((n, 1)),
                        C=np.eye(n), D=np.eye(n),
                        Sigma_w=np.eye(n), Sigma_v=np.eye(n), lam=0.5)
        s = ControlSpec(Q=np.diag([2.0, 3.0]), R=np.eye(1), H=np.eye(n),
                        beta=0.9, epsilon=1.0, N=2)
        g = Gains(K=np.zeros((1, n)), M=np.zeros((n, n)),
                  rho_phi=0.0, rho_ms=0.0, rho_lyap=0.0)
        maps = build_lyapunov_maps(m, g, s)
        assert np.allclose(maps.lifted_inverse, np.eye(4 * n * n), atol=1e-13)
        assert np.allclose(maps.W_cost_dual, _cost_weight(s, g), atol=1e-13)
        assert np.allclose(maps.W_con_dual, _con_weight(s), atol=1e-13)

    def test_vanishing_discount_recovers_stage_weight(self, small):
        m, s, g, ops, _ = small
        s_small = ControlSpec(Q=s.Q, R=s.R, H=s.H, beta=1e-9,
                              epsilon=s.epsilon, N=s.N)
        maps = build_lyapunov_maps(m, g, s_small)
        assert np.allclose(maps.W_cost_dual, _cost_weight(s_small, g), rtol=1e-7)
        assert np.allclose(maps.W_con_dual, _con_weight(s_small), rtol=1e-7)

    def test_dual_weights_symmetric_psd(self, pendulum_setup):
        _, _, _, _, maps = pendulum_setup
        for W in (maps.W_cost_dual, maps.W_con_dual):
            assert np.allclose(W, W.T)
            assert np.linalg.eigvalsh(W).min() >= -1e-10 * np.trace(W)

    def test_adjoint_identity_pendulum(self, pendulum_setup):
        # tr(W · P(Xi)) == tr(W_dual · Xi) for random PSD probes
        m, s, g, _, maps = pendulum_setup
        rng = np.random.default_rng(11)
        Wc, Wg = _cost_weight(s, g), _con_weight(s)
        for _ in range(10):
            Xi = random_psd(rng, 2 * m.n_x)
            P = solve_terminal_lyapunov(maps, Xi)
            lhs = float(np.sum(Wc * P))
            rhs = float(np.sum(maps.W_cost_dual * Xi))
            assert lhs == pytest.approx(rhs, rel=1e-9)
            assert np.sum(Wg * P) == pytest.approx(np.sum(maps.W_con_dual * Xi),
                                                   rel=1e-9)

    def test_terminal_solve_satisfies_fixed_point(self, pendulum_setup):
        m, s, g, _, maps = pendulum_setup
        rng = np.random.default_rng(4)
        Xi = random_psd(rng, 2 * m.n_x)
        P = solve_terminal_lyapunov(maps, Xi)
        from lossympc.model import joint_map
        J0 = joint_map(m, g.K, g.M, 0)
        J1 = joint_map(m, g.K, g.M, 1)
        back = s.beta * ((1 - m.lam) * J0 @ P @ J0.T + m.lam * J1 @ P @ J1.T) + Xi
        assert np.allclose(P, back, rtol=1e-9, atol=1e-12)

    def test_unstable_joint_map_raises(self):
        n = 2
        m = SystemModel(A=1.2 * np.eye(n), B=np.zeros((n, 1)),
                        C=np.eye(n), D=np.eye(n),
                        Sigma_w=np.eye(n), Sigma_v=np.eye(n), lam=0.5)
        s = ControlSpec(Q=np.eye(n), R=np.eye(1), H=np.eye(n),
                        beta=0.95, epsilon=1.0, N=2)
        g = Gains(K=np.zeros((1, n)), M=np.zeros((n, n)),
                  rho_phi=1.2, rho_ms=0.0, rho_lyap=0.0)
        with pytest.raises(LyapunovIllPosed):
            build_lyapunov_maps(m, g, s)

    def test_noise_constants_nonnegative(self, pendulum_setup):
        _, _, _, _, maps = pendulum_setup
        assert maps.noise_const_cost >= 0
        assert maps.noise_const_con >= 0


class TestEvaluateForm:
    def test_zero_form(self):
        f = QuadraticForm(Hess=np.zeros((3, 3)), lin=np.zeros(3), const=0.0)
        assert evaluate_form(f, np.array([1.0, -2.0, 3.0])) == 0.0

    def test_unit_example(self):
        f = QuadraticForm(Hess=2.0 * np.eye(3), lin=np.zeros(3), const=0.0)
        e1 = np.array([1.0, 0.0, 0.0])
        assert evaluate_form(f, e1) == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        f = QuadraticForm(Hess=np.eye(2), lin=np.zeros(2), const=0.0)
        with pytest.raises(DimensionMismatch):
            evaluate_form(f, np.zeros(3))


class TestAssembledForms:
    def test_matches_moment_path(self, small):
        m, s, g, ops, maps = small
        rng = np.random.default_rng(7)
        Sigma = random_psd(rng, m.n_x)
        Om, OmN = compute_omega(ops, Sigma)
        x_hat = rng.normal(size=m.n_x)
        fc = assemble_cost(ops, maps, Om, OmN, x_hat)
        fg = assemble_constraint(ops, maps, Om, OmN, x_hat)
        for _ in range(8):
            pol = random_policy(rng, ops)
            th = ops.flatten_policy(pol)
            vc = value_by_moments(ops, maps, pol, x_hat, Om, OmN, "cost")
            vg = value_by_moments(ops, maps, pol, x_hat, Om, OmN, "constraint")
            assert evaluate_form(fc, th) == pytest.approx(vc, rel=1e-12)
            assert evaluate_form(fg, th) == pytest.approx(vg, rel=1e-12, abs=1e-12)

    def test_matches_probing(self, small):
        m, s, g, ops, maps = small
        rng = np.random.default_rng(8)
        Sigma = random_psd(rng, m.n_x)
        Om, OmN = compute_omega(ops, Sigma)
        x_hat = rng.normal(size=m.n_x)
        for which, assemble in (("cost", assemble_cost),
                                ("constraint", assemble_constraint)):
            fa = assemble(ops, maps, Om, OmN, x_hat)
            fp = assemble_by_probing(ops, maps, Om, OmN, x_hat, which)
            scale = max(1.0, np.abs(fa.Hess).max())
            assert np.abs(fa.Hess - fp.Hess).max() <= 1e-10 * scale
            assert np.abs(fa.lin - fp.lin).max() <= 1e-10 * max(1.0, np.abs(fa.lin).max())
            assert fa.const == pytest.approx(fp.const, rel=1e-10, abs=1e-12)

    def test_matches_probing_pendulum(self, pendulum_setup, pendulum_belief):
        m, s, g, ops, maps = pendulum_setup
        Om, OmN = compute_omega(ops, pendulum_belief.Sigma0)
        x_hat = pendulum_belief.x_hat0
        fa = assemble_cost(ops, maps, Om, OmN, x_hat)
        fp = assemble_by_probing(ops, maps, Om, OmN, x_hat, "cost")
        # probing differences values of magnitude ~const, so compare on that scale
        scale = max(1.0, abs(fp.const), np.abs(fa.Hess).max())
        assert np.abs(fa.Hess - fp.Hess).max() <= 1e-10 * scale
        assert np.abs(fa.lin - fp.lin).max() <= 1e-10 * scale
        assert fa.const == pytest.approx(fp.const, rel=1e-10)

    def test_explicit_terminal_path(self, small):
        # replace the dual-weight tail with an explicit terminal-moment solve
        m, s, g, ops, maps = small
        rng = np.random.default_rng(9)
        Sigma = random_psd(rng, m.n_x)
        Om, OmN = compute_omega(ops, Sigma)
        x_hat = rng.normal(size=m.n_x)
        noise = tail_noise_matrix(m, g, s)
        N, n_x = s.N, m.n_x
        ne = N * n_x
        disc = np.diag(s.beta ** np.arange(N))
        Qbar = np.kron(disc, s.Q)
        Rbar = np.kron(disc, s.R)
        Hbar = np.kron(disc, s.H.T @ s.H)
        fc = assemble_cost(ops, maps, Om, OmN, x_hat)
        fg = assemble_constraint(ops, maps, Om, OmN, x_hat)
        for _ in range(4):
            pol = random_policy(rng, ops)
            mom = compute_moments(ops, pol, x_hat, Om, OmN)
            Xee = mom.X[:ne, :ne]
            Xex = mom.X[:ne, ne:]
            Xxx = mom.X[ne:, ne:]
            Xstate = Xee + Xex + Xex.T + Xxx
            P = solve_terminal_lyapunov(maps, (s.beta ** N) * mom.X_N + noise)
            vc = (np.sum(Qbar * Xstate) + np.sum(Rbar * mom.U2)
                  + np.sum(_cost_weight(s, g) * P))
            vg = np.sum(Hbar * Xstate) + np.sum(_con_weight(s) * P)
            th = ops.flatten_policy(pol)
            assert evaluate_form(fc, th) == pytest.approx(vc, rel=1e-9)
            assert evaluate_form(fg, th) == pytest.approx(vg, rel=1e-9)

    def test_hessians_psd_random_sigma(self, small):
        m, s, g, ops, maps = small
        rng = np.random.default_rng(10)
        for _ in range(5):
            Sigma = random_psd(rng, m.n_x)
            Om, OmN = compute_omega(ops, Sigma)
            x_hat = rng.normal(size=m.n_x)
            for f in (assemble_cost(ops, maps, Om, OmN, x_hat),
                      assemble_constraint(ops, maps, Om, OmN, x_hat)):
                lo = np.linalg.eigvalsh(f.Hess).min()
                assert lo >= -1e-8 * max(1.0, np.trace(f.Hess))

    def test_cost_nonnegative(self, small):
        m, s, g, ops, maps = small
        rng = np.random.default_rng(12)
        for _ in range(6):
            Sigma = random_psd(rng, m.n_x)
            Om, OmN = compute_omega(ops, Sigma)
            x_hat = 3.0 * rng.normal(size=m.n_x)
            fc = assemble_cost(ops, maps, Om, OmN, x_hat)
            fg = assemble_constraint(ops, maps, Om, OmN, x_hat)
            th = ops.flatten_policy(random_policy(rng, ops))
            assert evaluate_form(fc, th) >= 0.0
            assert evaluate_form(fg, th) >= -1e-12

    def test_deterministic_zero_noise_case(self):
        # no process/measurement noise, zero belief: value(0) = 0, Hess PSD
        n = 3
        rng = np.random.default_rng(14)
        A = 0.5 * np.eye(n)
        B = rng.normal(size=(n, 2))
        m = SystemModel(A=A, B=B, C=np.eye(n), D=np.eye(n),
                        Sigma_w=np.zeros((n, n)), Sigma_v=np.zeros((n, n)),
                        lam=0.7)
        s = ControlSpec(Q=np.eye(n), R=0.1 * np.eye(2), H=np.eye(n),
                        beta=0.9, epsilon=1.0, N=2)
        g = Gains(K=np.zeros((2, n)), M=np.zeros((n, n)),
                  rho_phi=0.0, rho_ms=0.0, rho_lyap=0.0)
        ops = build_operators(m, g, s)
        maps = build_lyapunov_maps(m, g, s)
        Om, OmN = compute_omega(ops, np.zeros((n, n)))
        fc = assemble_cost(ops, maps, Om, OmN, np.zeros(n))
        fg = assemble_constraint(ops, maps, Om, OmN, np.zeros(n))
        assert evaluate_form(fc, np.zeros(ops.n_theta)) == pytest.approx(0.0, abs=1e-14)
        assert evaluate_form(fg, np.zeros(ops.n_theta)) == pytest.approx(0.0, abs=1e-14)
        assert np.linalg.eigvalsh(fc.Hess).min() >= -1e-10

    def test_zero_output_weight_vacuous_constraint(self, small):
        m, s, g, _, _ = small
        s0 = ControlSpec(Q=s.Q, R=s.R, H=np.zeros_like(s.H), beta=s.beta,
                         epsilon=s.epsilon, N=s.N)
        ops0 = build_operators(m, g, s0)
        maps0 = build_lyapunov_maps(m, g, s0)
        rng = np.random.default_rng(15)
        Om, OmN = compute_omega(ops0, random_psd(rng, m.n_x))
        fg = assemble_constraint(ops0, maps0, Om, OmN, rng.normal(size=m.n_x))
        th = ops0.flatten_policy(random_policy(rng, ops0))
        assert evaluate_form(fg, th) == pytest.approx(0.0, abs=1e-12)

    def test_expansion_cache_reused(self, small):
        m, s, g, ops, maps = small
        a = get_expansions(ops, maps)
        b = get_expansions(ops, maps)
        assert a[0] is b[0] and a[1] is b[1]

    def test_value_batch_matches_pointwise(self, small):
        m, s, g, ops, maps = small
        rng = np.random.default_rng(16)
        Sigma = random_psd(rng, m.n_x)
        Om, OmN = compute_omega(ops, Sigma)
        exp_cost, exp_con = get_expansions(ops, maps)
        pol = random_policy(rng, ops)
        n_c = s.N * m.n_u
        B_ = 7
        x_cols = rng.normal(size=(m.n_x, B_))
        c_cols = rng.normal(size=(n_c, B_))
        for exp in (exp_cost, exp_con):
            batch = exp.value_batch(Om, OmN, x_cols, c_cols, pol.L)
            for b in range(B_):
                f = exp.form(Om, OmN, x_cols[:, b])
                th = np.concatenate([c_cols[:, b], pol.L.ravel(order="F")[ops.free_idx]])
                assert batch[b] == pytest.approx(evaluate_form(f, th), rel=1e-12)
