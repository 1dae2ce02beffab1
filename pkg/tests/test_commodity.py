"""Tests for the two-factor commodity futures model.

Oracles: independently transcribed closed-form entries (different algebraic
arrangement via ``expm1``), an Euler-Maruyama simulation of the continuous
model, closed-form futures loadings, and a Gaussian moment-propagation route
for the single-regime intercept recursion.
"""

import math

import numpy as np
import pytest

from rbsmc.commodity import (
    DEFAULT_MATURITIES,
    FuturesPanel,
    TwoFactorParams,
    build_clgm,
    default_start_params,
    discretize_sde,
    ingest_futures_csv,
    initial_state_from_panel,
    params_with_initial_state,
    simulate_panel,
    term_structure,
    write_futures_csv,
)
from rbsmc.model import ModelValidationError
from sde_reference import euler_maruyama_moments


def single_regime_params(kappa, alpha, sigma, eta, rho, r=0.0296, tau=1.0 / 52.0):
    return TwoFactorParams(
        kappa=kappa,
        alpha=[alpha],
        sigma=[sigma],
        eta=[eta],
        rho=[rho],
        g=[0.1],
        Q=[[1.0]],
        pi=[1.0],
        mu1=[3.0, 0.05],
        Sigma1=0.05 * np.eye(2),
        r=r,
        tau=tau,
    )


def reference_discretization(kappa, alpha, sigma, eta, rho, r, h):
    """Independent transcription of the exact one-step coefficients.

    Uses ``expm1`` arrangements throughout so any slip in the package's
    algebra shows up as a mismatch.
    """
    em1 = -math.expm1(-kappa * h)
    em2 = -math.expm1(-2.0 * kappa * h)
    d = np.array([(r - alpha - 0.5 * sigma * sigma) * h + alpha * em1 / kappa, alpha * em1])
    T = np.array([[1.0, math.expm1(-kappa * h) / kappa], [0.0, math.exp(-kappa * h)]])
    h11 = (
        sigma * sigma * h
        + (eta / kappa) ** 2 * (h + em2 / (2.0 * kappa) - 2.0 * em1 / kappa)
        - (2.0 * rho * eta * sigma / kappa) * (h - em1 / kappa)
    )
    h12 = (rho * eta * sigma - eta * eta / kappa) * em1 / kappa + eta * eta * em2 / (
        2.0 * kappa * kappa
    )
    h22 = eta * eta * em2 / (2.0 * kappa)
    return d, T, np.array([[h11, h12], [h12, h22]])


class TestDiscretization:
    def test_worked_spot_values(self):
        # Entries that depend only on (kappa, eta, h): frozen closed forms.
        params = single_regime_params(kappa=5.0, alpha=0.1, sigma=0.4, eta=0.5, rho=0.75)
        d, T, Hbar = discretize_sde(params, 0, h=0.1)
        assert abs(Hbar[1, 1] - 0.25 * (1.0 - math.exp(-1.0)) / 10.0) <= 1e-12
        assert abs(Hbar[1, 1] - 0.0158030) <= 5e-8
        assert abs(T[0, 1] - (-(1.0 - math.exp(-0.5)) / 5.0)) <= 1e-12
        assert abs(T[0, 1] - (-0.0786939)) <= 5e-8

    def test_small_step_limits(self):
        params = single_regime_params(kappa=5.0, alpha=0.1, sigma=0.4, eta=0.5, rho=0.75)
        d, T, Hbar = discretize_sde(params, 0, h=1e-8)
        assert np.max(np.abs(T - np.eye(2))) <= 1e-6
        assert np.max(np.abs(d)) <= 1e-6
        assert np.max(np.abs(Hbar)) <= 1e-6

    def test_matches_independent_transcription(self):
        rng = np.random.default_rng(1001)
        for _ in range(25):
            kappa = rng.uniform(0.5, 8.0)
            alpha = rng.uniform(-0.3, 0.3)
            sigma = rng.uniform(0.1, 1.0)
            eta = rng.uniform(0.1, 1.0)
            rho = rng.uniform(-0.9, 0.9)
            r = rng.uniform(0.0, 0.1)
            h = rng.uniform(0.01, 0.5)
            params = single_regime_params(kappa, alpha, sigma, eta, rho, r=r)
            d, T, Hbar = discretize_sde(params, 0, h)
            d_ref, T_ref, H_ref = reference_discretization(kappa, alpha, sigma, eta, rho, r, h)
            for got, want in ((d, d_ref), (T, T_ref), (Hbar, H_ref)):
                scale = np.maximum(np.abs(want), 1e-3)
                assert np.max(np.abs(got - want) / scale) <= 1e-12

    def test_regime_indexing_uses_per_regime_parameters(self):
        params = default_start_params(mu1=[3.0, 0.05])
        d0, T0, H0 = discretize_sde(params, 0, params.tau)
        d1, T1, H1 = discretize_sde(params, 1, params.tau)
        assert np.array_equal(T0, T1)  # kappa shared, so the matrix is too
        assert not np.allclose(d0, d1)  # alpha differs across regimes
        assert not np.allclose(H0, H1)  # rho differs across regimes

    def test_euler_maruyama_agreement(self):
        # Simulate the continuous model with fine substeps and compare the
        # sample moments of Z_h to the closed-form one-step coefficients.
        kappa, alpha, sigma, eta, rho, r = 5.0, 0.1, 0.4, 0.5, 0.75, 0.0296
        h = 1.0 / 52.0
        z0 = np.array([2.5, 0.3])
        params = single_regime_params(kappa, alpha, sigma, eta, rho, r=r)
        d, T, Hbar = discretize_sde(params, 0, h)
        mean, cov, mean_se, cov_se = euler_maruyama_moments(
            kappa, alpha, sigma, eta, rho, r, h, z0,
            n_paths=150_000, n_sub=1000, rng=np.random.default_rng(42),
        )
        assert np.all(np.abs(mean - (d + T @ z0)) <= 3.0 * mean_se)
        assert np.all(np.abs(cov - Hbar) <= 3.0 * cov_se)

    def test_rejects_bad_parameters(self):
        good = dict(kappa=5.0, alpha=0.1, sigma=0.4, eta=0.5, rho=0.75)
        with pytest.raises(ModelValidationError):
            single_regime_params(**{**good, "kappa": 0.0})
        with pytest.raises(ModelValidationError):
            single_regime_params(**{**good, "rho": 1.0})
        with pytest.raises(ModelValidationError):
            single_regime_params(**{**good, "sigma": 0.0})
        with pytest.raises(ModelValidationError):
            single_regime_params(**{**good, "eta": -0.5})
        with pytest.raises(ModelValidationError):
            single_regime_params(**good, tau=0.0)
        with pytest.raises(ModelValidationError):
            TwoFactorParams(
                kappa=5.0, alpha=[0.1], sigma=[0.4], eta=[0.5], rho=[0.75],
                g=[0.1, -0.1], Q=[[1.0]], pi=[1.0], mu1=[0.0, 0.0], Sigma1=np.eye(2),
            )
        with pytest.raises(ModelValidationError):
            TwoFactorParams(
                kappa=5.0, alpha=[0.1], sigma=[0.4], eta=[0.5], rho=[0.75],
                g=[0.1], Q=[[0.7]], pi=[1.0], mu1=[0.0, 0.0], Sigma1=np.eye(2),
            )
        params = single_regime_params(**good)
        with pytest.raises(ModelValidationError):
            discretize_sde(params, 0, h=0.0)

    def test_params_json_round_trip(self):
        params = default_start_params(mu1=[3.2, 0.04])
        restored = TwoFactorParams.from_json(params.to_json())
        for name in ("alpha", "sigma", "eta", "rho", "g", "Q", "pi", "mu1", "Sigma1"):
            assert np.array_equal(getattr(params, name), getattr(restored, name))
        assert restored.kappa == params.kappa
        assert restored.r == params.r
        assert restored.tau == params.tau
        with pytest.raises(ModelValidationError):
            TwoFactorParams.from_json("{\"kappa\": 5.0}")


class TestTermStructure:
    def test_loading_closed_form(self):
        params = default_start_params(mu1=[3.0, 0.05])
        structure = term_structure(params, max_m=60)
        kappa, tau = params.kappa, params.tau
        for m in range(61):
            assert abs(structure.Bvec[m, 0] - 1.0) <= 1e-12
            want = -(1.0 - math.exp(-kappa * m * tau)) / kappa
            assert abs(structure.Bvec[m, 1] - want) <= 1e-12

    def test_single_regime_intercept_closed_form(self):
        params = single_regime_params(kappa=3.0, alpha=0.08, sigma=0.35, eta=0.45, rho=0.6)
        structure = term_structure(params, max_m=60)
        d, T, Hbar = reference_discretization(
            params.kappa, params.alpha[0], params.sigma[0], params.eta[0], params.rho[0],
            params.r, params.tau,
        )
        # With one regime the recursion telescopes to a cumulative sum over
        # closed-form loadings.
        total = 0.0
        for m in range(61):
            assert abs(structure.A[m, 0] - total) <= 1e-12
            b_m = np.array([1.0, -(1.0 - math.exp(-params.kappa * m * params.tau)) / params.kappa])
            total += b_m @ d + 0.5 * b_m @ Hbar @ b_m

    def test_single_regime_matches_moment_propagation(self):
        # log E[exp(spot at delivery) | Z] is affine in Z with slope e1' T^m
        # and intercept from propagated Gaussian moments; the recursion must
        # reproduce both.
        params = single_regime_params(kappa=4.0, alpha=-0.05, sigma=0.5, eta=0.4, rho=-0.3)
        structure = term_structure(params, max_m=40)
        d, T, Hbar = reference_discretization(
            params.kappa, params.alpha[0], params.sigma[0], params.eta[0], params.rho[0],
            params.r, params.tau,
        )
        shift = np.zeros(2)
        spread = np.zeros((2, 2))
        power = np.eye(2)
        for m in range(41):
            intercept = shift[0] + 0.5 * spread[0, 0]
            assert abs(structure.A[m, 0] - intercept) <= 1e-12
            assert np.max(np.abs(structure.Bvec[m] - power[0])) <= 1e-12
            shift = d + T @ shift
            spread = T @ spread @ T.T + Hbar
            power = power @ T

    def test_identity_transition_decouples_regimes(self):
        params = default_start_params(mu1=[3.0, 0.05])
        joint = term_structure(params, max_m=30, Q=np.eye(2))
        for j in range(2):
            solo = term_structure(
                single_regime_params(
                    params.kappa, params.alpha[j], params.sigma[j], params.eta[j],
                    params.rho[j], r=params.r, tau=params.tau,
                ),
                max_m=30,
            )
            assert np.max(np.abs(joint.A[:, j] - solo.A[:, 0])) <= 1e-12
        assert np.max(np.abs(joint.Bvec - solo.Bvec)) <= 1e-14

    def test_log_price_helper(self):
        params = default_start_params(mu1=[3.0, 0.05])
        structure = term_structure(params, max_m=16)
        z = np.array([3.1, -0.2])
        want = structure.A[16, 1] + structure.Bvec[16] @ z
        assert structure.log_price(16, 1, z) == pytest.approx(want, abs=1e-15)

    def test_rejects_bad_inputs(self):
        params = default_start_params(mu1=[3.0, 0.05])
        with pytest.raises(ModelValidationError):
            term_structure(params, max_m=0)
        with pytest.raises(ModelValidationError):
            term_structure(params, max_m=5, Q=np.eye(3))


class TestBuildModel:
    def test_default_start_builds_valid_model(self):
        params = default_start_params(mu1=[3.2, 0.05])
        model = build_clgm(params, DEFAULT_MATURITIES)
        assert model.n_regimes == 2
        assert model.state_dim == 2
        assert model.obs_dim == 4
        assert np.array_equal(model.T[0], model.T[1])
        assert np.array_equal(model.B[0], model.B[1])
        assert np.max(np.abs(model.B[0][:, 0] - 1.0)) <= 1e-12
        assert np.array_equal(model.G[0], np.diag(params.g))
        assert not np.allclose(model.d[0], model.d[1])
        structure = term_structure(params, max(DEFAULT_MATURITIES))
        for j in range(2):
            assert np.max(np.abs(model.c[j] - structure.A[list(DEFAULT_MATURITIES), j])) <= 1e-14
        for j in range(2):
            _, _, Hbar = discretize_sde(params, j, params.tau)
            assert np.max(np.abs(model.H[j] @ model.H[j].T - Hbar)) <= 1e-15

    def test_observation_row_consistency(self):
        params = default_start_params(mu1=[3.2, 0.05])
        maturities = (4, 16, 26, 56)
        model = build_clgm(params, maturities)
        structure = term_structure(params, max(maturities))
        z = np.array([3.4, 0.12])
        for j in range(2):
            rows = model.c[j] + model.B[j] @ z
            want = [structure.log_price(m, j, z) for m in maturities]
            assert np.max(np.abs(rows - np.array(want))) <= 1e-14

    def test_rejects_bad_maturities(self):
        params = default_start_params(mu1=[3.0, 0.05])
        with pytest.raises(ModelValidationError):
            build_clgm(params, [])
        with pytest.raises(ModelValidationError):
            build_clgm(params, [0, 4, 16, 26])
        with pytest.raises(ModelValidationError):
            build_clgm(params, [4, 16, 26])  # g has 4 entries


class TestPanelIO:
    def test_ingest_simple_csv(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text(
            "date,F1,F4,F6,F13\n"
            "2020-01-03,20.0,21.5,22.0,23.5\n"
            "2020-01-10,20.5,21.0,22.5,24.0\n"
        )
        panel = ingest_futures_csv(path)
        assert panel.dates == ("2020-01-03", "2020-01-10")
        assert panel.maturities == DEFAULT_MATURITIES
        want = np.log([[20.0, 21.5, 22.0, 23.5], [20.5, 21.0, 22.5, 24.0]])
        assert np.max(np.abs(panel.log_prices - want)) <= 1e-15

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        panel = FuturesPanel(
            dates=tuple(f"2021-02-{day:02d}" for day in range(1, 11)),
            maturities=(4, 16, 26, 56),
            log_prices=rng.normal(3.0, 0.4, size=(10, 4)),
        )
        path = tmp_path / "panel.csv"
        write_futures_csv(path, panel)
        restored = ingest_futures_csv(path)
        assert restored.dates == panel.dates
        assert restored.maturities == panel.maturities
        assert np.max(np.abs(restored.log_prices - panel.log_prices)) <= 1e-12

    def test_rejects_nonpositive_price_naming_cell(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text(
            "date,F1,F4,F6,F13\n"
            "2020-01-03,20.0,21.5,22.0,23.5\n"
            "2020-01-10,20.5,0.0,22.5,24.0\n"
        )
        with pytest.raises(ModelValidationError, match=r"row 3.*'F4'"):
            ingest_futures_csv(path)

    def test_rejects_non_numeric_cell(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text("date,F1,F4,F6,F13\n2020-01-03,20.0,oops,22.0,23.5\n")
        with pytest.raises(ModelValidationError, match=r"row 2.*'F4'.*not a number"):
            ingest_futures_csv(path)

    def test_rejects_non_monotone_dates(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text(
            "date,F1,F4,F6,F13\n"
            "2020-01-10,20.0,21.5,22.0,23.5\n"
            "2020-01-03,20.5,21.0,22.5,24.0\n"
        )
        with pytest.raises(ModelValidationError, match="strictly increasing"):
            ingest_futures_csv(path)

    def test_rejects_malformed_files(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text("")
        with pytest.raises(ModelValidationError, match="empty"):
            ingest_futures_csv(path)
        path.write_text("time,F1,F4,F6,F13\n2020-01-03,20,21,22,23\n")
        with pytest.raises(ModelValidationError, match="must be 'date'"):
            ingest_futures_csv(path)
        path.write_text("date,F1,F4,F6\n2020-01-03,20,21,22\n")
        with pytest.raises(ModelValidationError, match="price columns"):
            ingest_futures_csv(path)
        path.write_text("date,F1,F4,F6,F13\n2020-01-03,20,21,22\n")
        with pytest.raises(ModelValidationError, match="row 2 has 4 cells"):
            ingest_futures_csv(path)
        path.write_text("date,F1,F4,F6,F13\n")
        with pytest.raises(ModelValidationError, match="no data rows"):
            ingest_futures_csv(path)

    def test_initial_state_from_panel(self):
        log_prices = np.array([[3.0, 3.06, 3.1, 3.2], [3.1, 3.0, 3.2, 3.3]])
        panel = FuturesPanel(
            dates=("2020-01-03", "2020-01-10"),
            maturities=(4, 16, 26, 56),
            log_prices=log_prices,
        )
        mu1, Sigma1 = initial_state_from_panel(panel, r=0.0296, tau=1.0 / 52.0)
        assert mu1[0] == pytest.approx(3.0, abs=1e-15)
        # Yield = r - slope over the 12-week gap between the first two contracts.
        assert mu1[1] == pytest.approx(0.0296 - 0.06 / (12.0 / 52.0), abs=1e-12)
        assert np.array_equal(Sigma1, 0.05 * np.eye(2))

    def test_simulate_panel_round_trips(self, tmp_path):
        params = default_start_params(mu1=[3.2, 0.05])
        panel, regimes, states = simulate_panel(
            params, DEFAULT_MATURITIES, n=25, rng=np.random.default_rng(3)
        )
        assert panel.n_times == 25
        assert regimes.shape == (25,)
        assert states.shape == (25, 2)
        path = tmp_path / "sim.csv"
        write_futures_csv(path, panel)
        restored = ingest_futures_csv(path)
        assert np.max(np.abs(restored.log_prices - panel.log_prices)) <= 1e-12
        fitted = params_with_initial_state(params, *initial_state_from_panel(restored))
        assert fitted.mu1[0] == pytest.approx(panel.log_prices[0, 0], abs=1e-12)
