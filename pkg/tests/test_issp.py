import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smpc.issp import (
    CertificationError,
    IsspBound,
    autonomous_lyapunov,
    calibrate_issp_bound,
    certify,
    check_sublevel_in_x0,
    decay_envelope,
    expected_decrease_autonomous,
    gamma_threshold,
    issp_empirical_check,
    kappa_coefficient,
    mpc_noise_offset,
    recurrence_stats,
    required_offsets,
    rho_offset,
)
from smpc.sim import ZeroController, run_closed_loop, run_stream

from conftest import A_REF, P_REF, Q_REF, SIGMA_W


def eig2(S):
    a, b, d = S[0, 0], S[0, 1], S[1, 1]
    m, r = 0.5 * (a + d), math.sqrt(0.25 * (a - d) ** 2 + b * b)
    return m - r, m + r


def noise_free_runs(A, starts, steps):
    runs = []
    for x in starts:
        X = [np.asarray(x, dtype=float)]
        for _ in range(steps):
            X.append(A @ X[-1])
        runs.append(np.array(X))
    return runs


class TestLyapunov:
    def test_zero_dynamics(self):
        Q = np.diag([1.0, 2.0])
        assert np.allclose(autonomous_lyapunov(np.zeros((2, 2)), Q), Q)

    def test_reference_round_trip(self):
        Q_lyap = P_REF - A_REF.T @ P_REF @ A_REF
        P = autonomous_lyapunov(A_REF, 0.5 * (Q_lyap + Q_lyap.T))
        assert np.abs(P - P_REF).max() <= 5e-3

    def test_reference_decrease_negative(self):
        assert eig2(A_REF.T @ P_REF @ A_REF - P_REF)[1] < 0

    def test_unstable(self):
        with pytest.raises(Exception, match="unstable"):
            autonomous_lyapunov(1.05 * A_REF, np.eye(2))


class TestKappa:
    def test_zero_dynamics(self):
        P = np.diag([2.0, 5.0])
        assert kappa_coefficient(P, np.zeros((2, 2))) == pytest.approx(0.4)

    @pytest.mark.parametrize("a", [0.0, 0.3, -0.9])
    def test_scalar(self, a):
        assert kappa_coefficient([[3.0]], [[a]]) == pytest.approx(1 - a * a)

    def test_reference_against_closed_form(self):
        D = P_REF - A_REF.T @ P_REF @ A_REF
        expected = eig2(0.5 * (D + D.T))[0] / eig2(P_REF)[1]
        k = kappa_coefficient(P_REF, A_REF)
        assert 0 < k < 1
        assert k == pytest.approx(expected, rel=1e-10)

    def test_rejects_invalid_p(self):
        with pytest.raises(CertificationError):
            kappa_coefficient(np.eye(2), 1.05 * np.eye(2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        M = rng.normal(size=(3, 3))
        A = M / (1.2 * max(abs(np.linalg.eigvals(M))))
        W = rng.normal(size=(3, 3))
        P = autonomous_lyapunov(A, W @ W.T + 0.1 * np.eye(3))
        assert 0 < kappa_coefficient(P, A) <= 1


class TestOffsets:
    def test_rho_zero_noise(self):
        assert rho_offset(P_REF, np.zeros((2, 2))) == 0.0

    def test_rho_reference(self):
        assert rho_offset(P_REF, SIGMA_W) == pytest.approx(0.0273275, abs=1e-12)

    def test_rho_identity(self):
        assert rho_offset(np.eye(2), SIGMA_W) == pytest.approx(0.0125, abs=1e-15)

    def test_gamma_zero_noise(self):
        assert gamma_threshold(P_REF, A_REF, np.zeros((2, 2))) == 0.0

    def test_gamma_scalar(self):
        assert gamma_threshold([[1.0]], [[0.5]], [[1.0]]) == pytest.approx(4 / 3, rel=1e-14)

    def test_gamma_identity(self):
        g = gamma_threshold(P_REF, A_REF, SIGMA_W)
        assert g * kappa_coefficient(P_REF, A_REF) == pytest.approx(rho_offset(P_REF, SIGMA_W), abs=1e-12)
        assert 0 < g < math.inf

    def test_noise_offset_trivial(self):
        assert mpc_noise_offset(Q_REF, A_REF, SIGMA_W, 1) == pytest.approx(np.trace(Q_REF @ SIGMA_W))
        assert mpc_noise_offset(Q_REF, np.zeros((2, 2)), SIGMA_W, 7) == pytest.approx(np.trace(Q_REF @ SIGMA_W))

    def test_noise_offset_accumulation(self):
        total, Ai = 0.0, np.eye(2)
        for _ in range(10):
            total += np.sum((Ai.T @ Q_REF @ Ai) * SIGMA_W.T)
            Ai = Ai @ A_REF
        assert mpc_noise_offset(Q_REF, A_REF, SIGMA_W, 10) == pytest.approx(total, abs=1e-12)

    def test_noise_offset_horizon(self):
        with pytest.raises(ValueError):
            mpc_noise_offset(Q_REF, A_REF, SIGMA_W, 0)


class TestExpectedDecrease:
    def test_origin(self):
        assert expected_decrease_autonomous(P_REF, A_REF, SIGMA_W, [0, 0]) == rho_offset(P_REF, SIGMA_W)

    def test_reference_state(self):
        D = A_REF.T @ P_REF @ A_REF - P_REF
        expected = 100 * D[0, 0] + 0.0273275
        assert expected_decrease_autonomous(P_REF, A_REF, SIGMA_W, [10, 0]) == pytest.approx(expected, abs=1e-12)

    def test_monte_carlo_reference_state(self):
        rng = np.random.default_rng(55)
        x = np.array([10.0, 0.0])
        W = rng.standard_normal((100_000, 2)) @ np.linalg.cholesky(SIGMA_W).T
        nxt = A_REF @ x + W
        dv = np.einsum("ij,jk,ik->i", nxt, P_REF, nxt) - x @ P_REF @ x
        se = dv.std(ddof=1) / math.sqrt(dv.size)
        assert abs(dv.mean() - expected_decrease_autonomous(P_REF, A_REF, SIGMA_W, x)) <= 3 * se

    def test_sign_straddles_threshold(self):
        # decrease is negative exactly when x'(P - A'PA)x exceeds Tr(P Sigma_w)
        D = P_REF - A_REF.T @ P_REF @ A_REF
        rho = rho_offset(P_REF, SIGMA_W)
        for t in np.linspace(0, 2 * np.pi, 36, endpoint=False):
            d = np.array([np.cos(t), np.sin(t)])
            r = math.sqrt(rho / (d @ D @ d))
            assert expected_decrease_autonomous(P_REF, A_REF, SIGMA_W, 1.01 * r * d) < 0
            assert expected_decrease_autonomous(P_REF, A_REF, SIGMA_W, 0.99 * r * d) > 0

    def test_negative_outside_gamma_min(self):
        g = gamma_threshold(P_REF, A_REF, SIGMA_W)
        rng = np.random.default_rng(2)
        for _ in range(200):
            d = rng.normal(size=2)
            x = d * math.sqrt(1.0001 * g / (d @ P_REF @ d)) * rng.uniform(1, 3)
            assert expected_decrease_autonomous(P_REF, A_REF, SIGMA_W, x) < 0


class TestSublevel:
    def test_tiny(self, ref_data):
        assert check_sublevel_in_x0(ref_data, P_REF, 1e-8, 64).inside

    def test_huge_has_witness(self, ref_data):
        chk = check_sublevel_in_x0(ref_data, P_REF, 1e4, 64)
        assert not chk.inside
        assert not ref_data.X.contains(chk.witness)
        assert chk.witness_verdict == "outside"

    def test_reference(self, ref_data):
        g = 1.1 * gamma_threshold(P_REF, A_REF, SIGMA_W)
        assert check_sublevel_in_x0(ref_data, P_REF, g, 720).inside

    def test_gamma_positive(self, ref_data):
        with pytest.raises(ValueError):
            check_sublevel_in_x0(ref_data, P_REF, 0.0)


class TestCertify:
    def test_reference(self, ref_data):
        cert = certify(ref_data, P=P_REF)
        assert cert.certified
        assert cert.gamma > cert.gamma_min
        assert cert.rho == pytest.approx(0.0273275, abs=1e-12)
        assert 0 < cert.kappa_coeff <= 1
        d = cert.as_dict()
        assert d["certified"] is True and "witness" not in d

    def test_default_lyapunov(self, ref_data):
        cert = certify(ref_data)
        assert cert.stable and cert.gamma_min > 0


class TestRecurrence:
    def test_never_leaves(self):
        s = recurrence_stats([[True] * 10])
        assert s.excursions == 0 and s.all_returned and s.inside_steps == 10

    def test_single_excursion(self):
        s = recurrence_stats([["inside", "outside", "outside", "inside"]])
        assert s.excursions == 1
        assert s.hitting_times == (2,)
        assert s.histogram == {2: 1}

    def test_unreturned(self):
        s = recurrence_stats([[True, False, True, False, False]])
        assert s.excursions == 2 and s.unreturned == 1 and not s.all_returned
        assert s.max_hitting_time == 1

    def test_indeterminate_counts_outside(self):
        s = recurrence_stats([["inside", "indeterminate", "inside"]])
        assert s.hitting_times == (1,)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.booleans(), min_size=1, max_size=40), min_size=1, max_size=5))
    def test_step_accounting(self, flag_lists):
        s = recurrence_stats(flag_lists)
        total = sum(len(f) for f in flag_lists)
        assert s.inside_steps + s.outside_steps == total
        assert s.inside_steps == sum(sum(f) for f in flag_lists)
        assert s.excursions == len(s.hitting_times) + s.unreturned

    def test_missing_flags(self):
        class Bare:
            feasible_flags = None

        with pytest.raises(ValueError):
            recurrence_stats([Bare()])


class TestEmpiricalIssp:
    def test_noise_free_contraction(self):
        C, lam = decay_envelope(A_REF, 100)
        rng = np.random.default_rng(0)
        runs = noise_free_runs(A_REF, rng.uniform(-10, 10, size=(50, 2)), 100)
        res = issp_empirical_check(runs, 0.0, 100, (C, lam), 0.0)
        assert res.passed and res.fraction == 1.0

    def test_zero_eps_fails_with_noise(self, ref_sys, ref_noise):
        C, lam = decay_envelope(A_REF, 200)
        ctl = ZeroController(1)
        runs = [run_closed_loop(ref_sys, ctl, [10.0, 0.0], 200, run_stream(5, r), ref_noise) for r in range(20)]
        assert not issp_empirical_check(runs, 0.0, 200, (C, lam), 0.0).passed

    def test_offsets_monotone_in_rho(self, ref_sys, ref_noise):
        C, lam = decay_envelope(A_REF, 50)
        runs = [run_closed_loop(ref_sys, ZeroController(1), [5.0, 1.0], 50, run_stream(9, r), ref_noise) for r in range(30)]
        fr = [issp_empirical_check(runs, 0.1, 50, (C, lam), rho).fraction for rho in (0.0, 0.1, 0.3, 1.0)]
        assert fr == sorted(fr)
        req = required_offsets(runs, C, lam, 50)
        assert issp_empirical_check(runs, 0.1, 50, (C, lam), max(float(req.max()), 0.0)).fraction == 1.0

    def test_parameter_validation(self):
        runs = noise_free_runs(A_REF, [[1.0, 0.0]], 5)
        with pytest.raises(ValueError):
            issp_empirical_check(runs, 0.1, 5, (0.5, 0.9), 0.0)
        with pytest.raises(ValueError):
            issp_empirical_check(runs, 0.1, 5, (1.0, 1.0), 0.0)
        with pytest.raises(ValueError):
            issp_empirical_check(runs, 0.1, 5, (1.0, 0.9), -1.0)

    def test_envelope_bounds_powers(self):
        C, lam = decay_envelope(A_REF, 300)
        Ai = np.eye(2)
        for i in range(301):
            assert np.linalg.norm(Ai, 2) <= C * lam**i * (1 + 1e-12)
            Ai = A_REF @ Ai

    def test_envelope_unstable(self):
        with pytest.raises(CertificationError):
            decay_envelope(1.05 * A_REF, 10)

    def test_calibration_quantile(self):
        C, lam = decay_envelope(A_REF, 20)
        runs = noise_free_runs(A_REF, [[1.0, 0.0]], 20)
        bound = calibrate_issp_bound(runs, A_REF, 0.1, 20)
        assert isinstance(bound, IsspBound)
        assert (bound.C, bound.lam) == (C, lam)
        assert bound.rho == 0.0
