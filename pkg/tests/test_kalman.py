import numpy as np
import pytest
from scipy.linalg import expm

from fbsde_filter.errors import RiccatiBlowup
from fbsde_filter.estimators import open_loop_dual_estimate
from fbsde_filter.kalman import (
    kalman_bucy_mean,
    lq_control_riccati,
    model_kalman,
    model_riccati,
    riccati_filter,
)
from fbsde_filter.model import TimeGrid
from fbsde_filter.sde_sim import ObservationRecord, simulate_truth_and_obs


class TestRiccatiFilter:
    def test_stationary_fixed_point(self):
        S = riccati_filter([[0.0]], [[1.0]], 1.0, [[1.0]], TimeGrid(1.0, 1000))
        np.testing.assert_allclose(S[:, 0, 0], 1.0, atol=1e-13)

    def test_pure_diffusion(self):
        grid = TimeGrid(1.0, 1000)
        S = riccati_filter([[0.0]], [[0.0]], 1.0, [[1.0]], grid)
        np.testing.assert_allclose(S[:, 0, 0], 1.0 + grid.times(), atol=1e-12)

    def test_pure_diffusion_matrix(self):
        grid = TimeGrid(1.0, 200)
        S0 = np.array([[1.0, 0.3], [0.3, 2.0]])
        S = riccati_filter(np.zeros((2, 2)), np.zeros((2, 1)), 0.5, S0, grid)
        expected = S0 + 0.25 * grid.t_end * np.eye(2)
        np.testing.assert_allclose(S[-1], expected, atol=1e-12)

    def test_benchmark_against_fine_grid(self):
        coarse = riccati_filter([[-1.0]], [[1.0]], 1.0, [[1.0]], TimeGrid(1.0, 1000))
        fine = riccati_filter([[-1.0]], [[1.0]], 1.0, [[1.0]], TimeGrid(1.0, 20000))
        assert abs(coarse[-1, 0, 0] - fine[-1, 0, 0]) < 1e-8
        # approaches the stationary root of -2 S + 1 - S^2 = 0
        long = riccati_filter([[-1.0]], [[1.0]], 1.0, [[1.0]], TimeGrid(8.0, 4000))
        assert abs(long[-1, 0, 0] - (np.sqrt(2.0) - 1.0)) < 1e-6

    def test_symmetry_and_psd_along_path(self):
        A = np.array([[0.0, 1.0], [-1.0, -0.5]])
        H = np.array([[1.0], [0.0]])
        S0 = np.array([[1.0, 0.2], [0.2, 0.5]])
        S = riccati_filter(A, H, 0.7, S0, TimeGrid(2.0, 500))
        np.testing.assert_allclose(S, np.swapaxes(S, 1, 2), atol=1e-12)
        eigs = np.linalg.eigvalsh(S)
        assert eigs.min() >= -1e-10

    def test_blowup_guard(self):
        with pytest.raises(RiccatiBlowup):
            riccati_filter([[5.0]], [[0.0]], 100.0, [[1.0]], TimeGrid(5.0, 500))

    def test_stiff_observation_gain(self):
        S = riccati_filter([[-1.0]], [[100.0]], 1.0, [[1.0]], TimeGrid(1.0, 1000))
        # stationary value approx sigma / H for large H
        assert abs(S[-1, 0, 0] - 0.01) < 2e-4


class TestKalmanBucyMean:
    def test_no_observation_is_linear_ode(self):
        grid = TimeGrid(1.0, 2000)
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        dZ = np.zeros((grid.n_steps, 1))
        obs = ObservationRecord(grid=grid, Z=np.zeros((grid.n_steps + 1, 1)), dZ=dZ)
        S = riccati_filter(A, np.zeros((2, 1)), 0.5, np.eye(2), grid)
        state = kalman_bucy_mean(A, np.zeros((2, 1)), S, [1.0, 2.0], obs)
        expected = expm(A.T * grid.t_end) @ np.array([1.0, 2.0])
        np.testing.assert_allclose(state.mean[-1], expected, rtol=1e-6)

    def test_zero_noise_equilibrium(self, lg_benchmark):
        grid = TimeGrid(1.0, 100)
        obs = ObservationRecord(grid=grid, Z=np.zeros(101), dZ=np.zeros(100),
                                X_truth=np.zeros(101))
        state = model_kalman(lg_benchmark, obs)
        np.testing.assert_array_equal(state.mean, 0.0)
        np.testing.assert_array_equal(state.innovation, 0.0)

    def test_filter_consistency(self, lg_benchmark):
        # mean error ~ 0 and error variance ~ Sigma_T over 2000 synthetic runs
        grid = TimeGrid(1.0, 400)
        Sigma = model_riccati(lg_benchmark, grid)
        errs = np.empty(2000)
        for r in range(2000):
            obs = simulate_truth_and_obs(lg_benchmark, grid, seed=7000 + r)
            state = kalman_bucy_mean(lg_benchmark.A, lg_benchmark.H, Sigma,
                                     lg_benchmark.m0, obs)
            errs[r] = state.mean[-1, 0] - obs.X_truth[-1]
        se = errs.std(ddof=1) / np.sqrt(len(errs))
        assert abs(errs.mean()) < 3 * se
        assert abs(errs.var(ddof=1) / Sigma[-1, 0, 0] - 1.0) < 0.10

    def test_duality_identity(self, lg_benchmark):
        # estimator assembled from the dual recursion equals f_bar^T m_T
        grid = TimeGrid(1.0, 1000)
        obs = simulate_truth_and_obs(lg_benchmark, grid, seed=42)
        Sigma = model_riccati(lg_benchmark, grid)
        state = kalman_bucy_mean(lg_benchmark.A, lg_benchmark.H, Sigma,
                                 lg_benchmark.m0, obs)
        dI = np.diff(state.innovation, axis=0)
        value = open_loop_dual_estimate(lg_benchmark.A, lg_benchmark.H, Sigma,
                                        lg_benchmark.f_bar, lg_benchmark.m0, dI, grid)
        target = float(lg_benchmark.f_bar @ state.mean[-1])
        assert abs(value - target) < 1e-10


class TestControlRiccati:
    def test_zero_gain_lyapunov(self):
        ric = lq_control_riccati([[0.0]], [[0.0]], [[1.0]], TimeGrid(1.0, 100))
        np.testing.assert_allclose(ric.P[:, 0, 0], 1.0, atol=1e-13)
        np.testing.assert_array_equal(ric.gains, 0.0)

    def test_scalar_closed_form(self):
        # -dP/dt = -2P - P^2, P_T = 1: P(s) = 2 e^{-2s} / (2 + (1 - e^{-2s}))
        tg = TimeGrid(1.0, 1000)
        ric = lq_control_riccati([[-1.0]], [[1.0]], [[1.0]], tg, sigma=1.0)
        s = 1.0 - tg.times()
        exact = 2.0 * np.exp(-2.0 * s) / (2.0 + (1.0 - np.exp(-2.0 * s)))
        np.testing.assert_allclose(ric.P[:, 0, 0], exact, atol=1e-10)
        fine = lq_control_riccati([[-1.0]], [[1.0]], [[1.0]], TimeGrid(1.0, 20000),
                                  sigma=1.0)
        assert abs(ric.P[0, 0, 0] - fine.P[0, 0, 0]) < 1e-8

    def test_value_matches_hjb_grid(self):
        from fbsde_filter.model import SpaceGrid
        from fbsde_filter.pde_backward import solve_hjb_quadratic
        from conftest import make_scalar
        tg = TimeGrid(1.0, 500)
        ric = lq_control_riccati([[-1.0]], [[1.0]], [[1.0]], tg, sigma=1.0)
        model = make_scalar("linear", {"a": -1.0}, f="quadratic",
                            f_params={"weight": 1.0}, control_gain=1.0)
        sg = SpaceGrid(-8, 8, 801)
        y, _ = solve_hjb_quadratic(model, sg, tg)
        xs = np.linspace(-2.0, 2.0, 20)
        v_grid = y.eval(0, xs)
        v_ric = ric.value(0, xs)
        assert np.max(np.abs(v_grid - v_ric) / np.abs(v_ric)) < 1e-2

    def test_psd_along_path(self):
        A = np.array([[0.0, 1.0], [-2.0, -0.3]])
        G = np.array([[0.0], [1.0]])
        ric = lq_control_riccati(A, G, np.eye(2), TimeGrid(1.0, 500))
        np.testing.assert_allclose(ric.P, np.swapaxes(ric.P, 1, 2), atol=1e-12)
        assert np.linalg.eigvalsh(ric.P).min() >= -1e-10


def test_gaussian_state_csv(tmp_path, lg_benchmark):
    grid = TimeGrid(1.0, 4)
    obs = simulate_truth_and_obs(lg_benchmark, grid, seed=5)
    state = model_kalman(lg_benchmark, obs)
    path = tmp_path / "state.csv"
    state.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "t,m_1,sigma_11"
    assert len(lines) == 6
