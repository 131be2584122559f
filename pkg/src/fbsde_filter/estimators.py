"""The four minimum-variance estimators and their diagnostics.

Each estimator has the form  estimate = Y0_term - sum_k u_k * d(driver)_k
with a left-point (Ito) Riemann sum over the simulation grid.  The optimal
controls are realized from a backward-PDE solution y and a weighted path
ensemble:

  sigma_obs        driver dZ, control -w_girsanov * y * h        (unnormalized)
  pi_innovation    driver dI, control -w_innov * y * (h - pi[h]) (normalized)
  pi_obs           driver dZ, deterministic control from the closed-loop
                   backward recursion (linear-Gaussian) or a frozen-data
                   fixed-point iteration (scalar models)
  sigma_obs_error  driver dW, control -w_girsanov * y_fk * h with y_fk from
                   the Feynman-Kac solve (requires synthetic truth)

The prior term uses Gauss-Hermite quadrature against the initial law, scaled
by the mean initial ensemble weight so that estimates are exactly linear in
the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import (
    FixedPointNotConverged,
    GridMismatch,
    MissingTruthPath,
    ModeModelMismatch,
    ResamplingForbiddenInEstimatorMode,
)
from .io import write_csv
from .kalman import model_riccati
from .model import LinearGaussianModelSpec, ScalarModelSpec, SpaceGrid, TimeGrid
from .pde_backward import GridFunction, solve_backward_with_source
from .sde_sim import ObservationRecord, PathEnsemble, compute_observation_error

ESTIMATOR_IDS = ("sigma_obs", "pi_innovation", "pi_obs", "sigma_obs_error")


@dataclass(frozen=True)
class VarianceDecayReport:
    """Backward-variance diagnostics for one weighted ensemble."""

    grid: TimeGrid
    var_y: np.ndarray            # ensemble variance of weight * y(X) per time
    var_std_err: np.ndarray      # sampling error of the variance estimate
    dirichlet_rhs: np.ndarray    # carre-du-champ estimate per time
    cumulative_rhs: np.ndarray   # left-point integral of the rhs

    def to_csv(self, path) -> None:
        times = self.grid.times()
        rows = (
            (times[k], self.var_y[k], self.dirichlet_rhs[k], self.cumulative_rhs[k])
            for k in range(len(times))
        )
        write_csv(path, ["t", "var", "rhs", "cum_rhs"], rows)


@dataclass(frozen=True)
class EstimatorReport:
    """Point estimate of one conditional-expectation estimator."""

    estimator_id: str
    point_estimate: float
    mc_std_err: float
    y0_prior_term: float
    stochastic_integral_term: float
    control_path: np.ndarray
    n_paths: int
    seed: int | None = None
    dt: float | None = None
    weight_collapse: bool = False
    n_iterations: int | None = None
    diagnostics: VarianceDecayReport | None = None

    def csv_row(self):
        return (self.estimator_id, self.point_estimate, self.mc_std_err,
                self.y0_prior_term, self.stochastic_integral_term,
                self.n_paths, self.dt if self.dt is not None else "",
                self.seed if self.seed is not None else "")

    @staticmethod
    def csv_header():
        return ["estimator_id", "estimate", "std_err", "mu_y0",
                "integral_term", "n_paths", "dt", "seed"]


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def _require_raw(ensemble: PathEnsemble) -> None:
    if ensemble.resample_steps:
        raise ResamplingForbiddenInEstimatorMode(
            "minimum-variance estimators require a non-resampled ensemble"
        )


def _check_grids(obs: ObservationRecord, ensemble: PathEnsemble,
                 y: GridFunction | None = None) -> None:
    if not obs.grid.matches(ensemble.grid):
        raise GridMismatch("ensemble and observation record use different grids")
    if y is not None and not obs.grid.matches(y.time_grid):
        raise GridMismatch("grid function and observation record use different grids")


def prior_expectation_of_initial_slice(model, y: GridFunction) -> float:
    """mu[y_0] by Gauss-Hermite quadrature against the model prior."""
    prior = model.prior
    return prior.expectation(lambda x: y.eval(0, x))


def _scalar_obs(model):
    if isinstance(model, LinearGaussianModelSpec):
        return model.as_scalar().obs_fn
    return model.obs_fn


def _weighted_fold(model, obs, y, ensemble, weight_kind, centered, driver):
    """Per-path Ito fold sum_k w_k y_k(X_k) c_k d_k and the averaged control."""
    lw = (ensemble.log_weights_girsanov if weight_kind == "girsanov"
          else ensemble.log_weights_innovation)
    if lw is None:
        raise ValueError(f"ensemble carries no {weight_kind} weights")
    K = ensemble.grid.n_steps
    n = ensemble.n_paths
    h_fn = _scalar_obs(model)
    acc = np.zeros(n)
    control = np.empty(K)
    pih = ensemble.pi_h_path
    for k in range(K):
        xk = ensemble.states[:, k]
        coeff = np.asarray(h_fn(xk), dtype=float)
        if centered:
            coeff = coeff - pih[k]
        integrand = np.exp(lw[:, k]) * y.eval(k, xk) * coeff
        control[k] = -integrand.mean()
        acc += integrand * driver[k]
    return acc, control


def _finish_report(estimator_id, model, y, ensemble, acc, control, seed=None):
    n = ensemble.n_paths
    w0 = np.exp(
        (ensemble.log_weights_girsanov
         if ensemble.log_weights_girsanov is not None
         else ensemble.log_weights_innovation)[:, 0]
    ).mean()
    mu_term = w0 * prior_expectation_of_initial_slice(model, y)
    integral = float(acc.mean())
    return EstimatorReport(
        estimator_id=estimator_id,
        point_estimate=mu_term + integral,
        mc_std_err=float(acc.std(ddof=1) / math.sqrt(n)),
        y0_prior_term=float(mu_term),
        stochastic_integral_term=integral,
        control_path=control,
        n_paths=n,
        seed=ensemble.seed if seed is None else seed,
        dt=ensemble.grid.dt,
        weight_collapse=ensemble.collapse_step is not None,
    )


# ---------------------------------------------------------------------------
# estimators I, II, IV
# ---------------------------------------------------------------------------

def estimate_sigma_obs(model, obs: ObservationRecord, y: GridFunction,
                       ensemble: PathEnsemble) -> EstimatorReport:
    """Observation-driven estimator of the unnormalized expectation sigma_T[f].

    estimate = mu[y_0] + sum_k mean_i( w_ik y_k(X_ik) h(X_ik) ) dZ_k with
    Girsanov weights; y solves the backward Kolmogorov equation for f.
    """
    _require_raw(ensemble)
    _check_grids(obs, ensemble, y)
    dZ = np.asarray(obs.dZ, dtype=float).reshape(-1)
    acc, control = _weighted_fold(model, obs, y, ensemble, "girsanov", False, dZ)
    return _finish_report("sigma_obs", model, y, ensemble, acc, control)


def estimate_pi_innovation(model, obs: ObservationRecord, y: GridFunction,
                           ensemble: PathEnsemble,
                           pi_h_source=None) -> EstimatorReport:
    """Innovation-driven estimator of the normalized expectation pi_T[f].

    estimate = mu[y_0] + sum_k mean_i( w_ik y_k(X_ik) (h - pi_k[h]) ) dI_k
    with mean-field innovation weights.  The pi[h] path and innovation
    increments stored on the ensemble are used; an explicit pi_h_source only
    validates against them.
    """
    _require_raw(ensemble)
    _check_grids(obs, ensemble, y)
    if ensemble.pi_h_path is None or ensemble.innovation_increments is None:
        raise ValueError("ensemble was not simulated with innovation weights")
    if pi_h_source is not None:
        given = np.asarray(pi_h_source, dtype=float).reshape(-1)
        if given.shape[0] == ensemble.grid.n_steps + 1:
            given = given[:-1]
        if not np.allclose(given, ensemble.pi_h_path, atol=1e-12):
            raise GridMismatch("pi_h source differs from the ensemble's realized path")
    dI = ensemble.innovation_increments
    acc, control = _weighted_fold(model, obs, y, ensemble, "innovation", True, dI)
    return _finish_report("pi_innovation", model, y, ensemble, acc, control)


def estimate_sigma_obs_error(model, obs: ObservationRecord, y_fk: GridFunction,
                             ensemble: PathEnsemble) -> EstimatorReport:
    """Observation-error-driven estimator of sigma_T[f].

    estimate = mu[y_fk,0]
             + sum_k mean_i( w_ik y_fk,k(X_ik) h(X_ik) dW_ik )

    where dW_ik = dZ_k - h(X_ik) dt is the per-path observation error of the
    ensemble member (the increment that makes the weighted backward process
    a martingale), and y_fk solves the reaction variant of the backward
    equation with the +h^2 y term (solve_feynman_kac(..., reaction="growth")).
    The op is restricted to synthetic records, where the data-generating
    observation error is available for diagnostics.
    """
    _require_raw(ensemble)
    _check_grids(obs, ensemble, y_fk)
    if obs.X_truth is None:
        raise MissingTruthPath("estimator needs a synthetic observation record")
    lw = ensemble.log_weights_girsanov
    if lw is None:
        raise ValueError("ensemble carries no girsanov weights")
    dZ = np.asarray(obs.dZ, dtype=float).reshape(-1)
    dt = ensemble.grid.dt
    h_fn = _scalar_obs(model)
    K = ensemble.grid.n_steps
    acc = np.zeros(ensemble.n_paths)
    control = np.empty(K)
    for k in range(K):
        xk = ensemble.states[:, k]
        hk = np.asarray(h_fn(xk), dtype=float)
        integrand = np.exp(lw[:, k]) * y_fk.eval(k, xk) * hk
        control[k] = -integrand.mean()
        acc += integrand * (dZ[k] - hk * dt)
    return _finish_report("sigma_obs_error", model, y_fk, ensemble, acc, control)


# ---------------------------------------------------------------------------
# estimator III
# ---------------------------------------------------------------------------

def closed_loop_dual_controls(A, H, Sigma_path, f_bar, grid: TimeGrid):
    """Discrete-dual closed-loop backward recursion.

    ybar_k = (I + A dt - H H^T Sigma_k dt) ybar_{k+1},
    u_k    = -H^T Sigma_k ybar_{k+1},

    which is the left-point discretization of the closed-loop backward
    equation paired exactly with the filtered-mean recursion: the resulting
    estimate ybar_0^T m_0 - sum u_k^T dZ_k telescopes to f_bar^T m_T to
    machine precision on the same grid.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    f_bar = np.asarray(f_bar, dtype=float).reshape(-1)
    Sigma = np.asarray(Sigma_path, dtype=float)
    if Sigma.ndim == 1:
        Sigma = Sigma.reshape(-1, 1, 1)
    K = grid.n_steps
    if Sigma.shape[0] != K + 1:
        raise GridMismatch("Sigma path does not cover the grid")
    dt = grid.dt
    n = A.shape[0]
    m_obs = H.shape[1]
    ybar = np.empty((K + 1, n))
    u = np.empty((K, m_obs))
    ybar[K] = f_bar
    for k in range(K - 1, -1, -1):
        HtSy = H.T @ (Sigma[k] @ ybar[k + 1])
        u[k] = -HtSy
        ybar[k] = ybar[k + 1] + dt * (A @ ybar[k + 1]) - dt * (H @ HtSy)
    return ybar, u


def open_loop_dual_estimate(A, H, Sigma_path, f_bar, m0, innovation_increments,
                            grid: TimeGrid) -> float:
    """Averaged innovation estimator in closed form.

    Uses the open-loop dual recursion ybar_k = (I + A dt) ybar_{k+1} and the
    left-point sum of ybar_{k+1}^T Sigma_k H dI_k, which telescopes exactly
    against the filtered-mean recursion (duality identity).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    f_bar = np.asarray(f_bar, dtype=float).reshape(-1)
    Sigma = np.asarray(Sigma_path, dtype=float)
    if Sigma.ndim == 1:
        Sigma = Sigma.reshape(-1, 1, 1)
    K = grid.n_steps
    dt = grid.dt
    dI = np.asarray(innovation_increments, dtype=float).reshape(K, H.shape[1])
    ybar = f_bar.copy()
    total = 0.0
    # accumulate backward: integrand at step k uses ybar_{k+1}
    terms = np.empty(K)
    for k in range(K - 1, -1, -1):
        terms[k] = float(ybar @ (Sigma[k] @ (H @ dI[k])))
        ybar = ybar + dt * (A @ ybar)
    total = terms.sum()
    m0 = np.asarray(m0, dtype=float).reshape(-1)
    return float(ybar @ m0) + total


def _pi_source_moments(pi_source, k):
    mean = pi_source.mean[k]
    cov = pi_source.covariance[k]
    return float(mean[0]), float(cov[0, 0])


def estimate_pi_obs(model, obs: ObservationRecord, ensemble: PathEnsemble | None = None,
                    mode: str = "lg_closed_form", pi_source=None,
                    space_grid: SpaceGrid | None = None,
                    Sigma_path=None, tol: float = 1e-6,
                    max_iter: int = 50) -> EstimatorReport:
    """Observation-driven estimator of pi_T[f] with a deterministic control.

    mode="lg_closed_form" (linear-Gaussian models): the control comes from
    the closed-loop dual recursion; the estimate equals f_bar^T m_T of the
    Kalman-Bucy filter on the same grid to machine precision.

    mode="fixed_point": iterate a frozen-data control.  For linear-Gaussian
    models the iteration runs at the ODE level (trapezoidal sourced solve,
    update u_k = -H^T Sigma_k ybar_k); for scalar models it sweeps the
    backward PDE -dy/dt = L y + u_t h(x) and updates
    u_k = -pi_k[y_k (h - pi_k[h])] with pi_k taken from `pi_source` (a
    GaussianState, evaluated by quadrature) or from the weighted `ensemble`.
    """
    grid = obs.grid
    dt = grid.dt
    K = grid.n_steps
    dZ = np.asarray(obs.dZ, dtype=float).reshape(-1)

    if mode == "lg_closed_form":
        if not isinstance(model, LinearGaussianModelSpec):
            raise ModeModelMismatch("lg_closed_form requires a linear-Gaussian model")
        Sigma = Sigma_path if Sigma_path is not None else model_riccati(model, grid)
        ybar, u = closed_loop_dual_controls(model.A, model.H, Sigma, model.f_bar, grid)
        mu_term = float(ybar[0] @ model.m0)
        dZm = np.asarray(obs.dZ, dtype=float).reshape(K, model.n_obs)
        integral = -float(np.einsum("km,km->", u, dZm))
        return EstimatorReport(
            estimator_id="pi_obs",
            point_estimate=mu_term + integral,
            mc_std_err=0.0,
            y0_prior_term=mu_term,
            stochastic_integral_term=integral,
            control_path=u,
            n_paths=0,
            seed=obs.seed,
            dt=dt,
        )

    if mode != "fixed_point":
        raise ModeModelMismatch(f"unknown mode {mode!r}")

    if isinstance(model, LinearGaussianModelSpec):
        Sigma = Sigma_path if Sigma_path is not None else model_riccati(model, grid)
        Sigma = np.asarray(Sigma, dtype=float)
        if Sigma.ndim == 1:
            Sigma = Sigma.reshape(-1, 1, 1)
        A = model.A
        H = model.H
        n = model.n_state
        m_obs = model.n_obs
        ident = np.eye(n)
        left = ident - 0.5 * dt * A
        right = ident + 0.5 * dt * A
        left_inv = np.linalg.inv(left)
        u = np.zeros((K + 1, m_obs))
        for it in range(max_iter):
            ybar = np.empty((K + 1, n))
            ybar[K] = model.f_bar
            for k in range(K - 1, -1, -1):
                src = 0.5 * dt * (H @ (u[k] + u[k + 1]))
                ybar[k] = left_inv @ (right @ ybar[k + 1] + src)
            u_new = -np.einsum("ji,kjl,kl->ki", H, Sigma, ybar)
            change = float(np.max(np.abs(u_new - u)))
            u = u_new
            if change < tol:
                break
        else:
            raise FixedPointNotConverged(
                f"control iteration stalled at change {change:.3e}"
            )
        mu_term = float(ybar[0] @ model.m0)
        dZm = np.asarray(obs.dZ, dtype=float).reshape(K, m_obs)
        integral = -float(np.einsum("km,km->", u[:-1], dZm))
        return EstimatorReport(
            estimator_id="pi_obs",
            point_estimate=mu_term + integral,
            mc_std_err=0.0,
            y0_prior_term=mu_term,
            stochastic_integral_term=integral,
            control_path=u,
            n_paths=0,
            seed=obs.seed,
            dt=dt,
            n_iterations=it + 1,
        )

    # scalar model: frozen-data fixed point on the grid PDE
    if not isinstance(model, ScalarModelSpec):
        raise ModeModelMismatch("fixed_point requires a scalar or linear-Gaussian model")
    if space_grid is None:
        raise ValueError("fixed_point mode on scalar models needs a space grid")
    if pi_source is None and ensemble is None:
        raise ValueError("fixed_point mode needs a pi source (GaussianState or ensemble)")
    if ensemble is not None:
        _require_raw(ensemble)
        _check_grids(obs, ensemble)

    h_fn = model.obs_fn
    nodes, wts = hermgauss(64)
    wts = wts / math.sqrt(math.pi)

    if pi_source is not None:
        pih = np.empty(K + 1)
        for k in range(K + 1):
            mk, vk = _pi_source_moments(pi_source, k)
            pih[k] = float(np.dot(wts, h_fn(mk + math.sqrt(2.0 * max(vk, 0.0)) * nodes)))
    else:
        lw = ensemble.log_weights_innovation
        if lw is None:
            raise ValueError("ensemble must carry innovation weights")
        w = np.exp(lw)
        hvals = np.asarray(h_fn(ensemble.states), dtype=float)
        pih = np.einsum("ik,ik->k", w, hvals) / w.sum(axis=0)

    def project(y: GridFunction, u_ignored):
        """pi_k[y_k (h - pi_k[h])] for every k."""
        out = np.empty(K + 1)
        if pi_source is not None:
            for k in range(K + 1):
                mk, vk = _pi_source_moments(pi_source, k)
                xq = mk + math.sqrt(2.0 * max(vk, 0.0)) * nodes
                out[k] = float(np.dot(wts, y.eval(k, xq) * (h_fn(xq) - pih[k])))
        else:
            w = np.exp(ensemble.log_weights_innovation)
            wsum = w.sum(axis=0)
            for k in range(K + 1):
                xk = ensemble.states[:, k]
                vals = y.eval(k, xk) * (np.asarray(h_fn(xk), dtype=float) - pih[k])
                out[k] = float(np.dot(w[:, k], vals) / wsum[k])
        return out

    u = np.zeros(K + 1)
    y = None
    for it in range(max_iter):
        u_frozen = u
        y = solve_backward_with_source(
            model, space_grid, grid,
            running_cost=lambda k, xs, a: u_frozen[k] * np.asarray(h_fn(xs), dtype=float),
        )
        u_new = -project(y, u)
        change = float(np.max(np.abs(u_new - u)))
        u = u_new
        if change < tol:
            break
    else:
        raise FixedPointNotConverged(f"control iteration stalled at change {change:.3e}")

    mu_term = prior_expectation_of_initial_slice(model, y)
    integral = -float(np.dot(u[:-1], dZ))
    return EstimatorReport(
        estimator_id="pi_obs",
        point_estimate=mu_term + integral,
        mc_std_err=0.0,
        y0_prior_term=mu_term,
        stochastic_integral_term=integral,
        control_path=u,
        n_paths=0 if ensemble is None else ensemble.n_paths,
        seed=obs.seed,
        dt=dt,
        n_iterations=it + 1,
    )


# ---------------------------------------------------------------------------
# cost functional and variance decay
# ---------------------------------------------------------------------------

def cost_functional_per_path(model, estimator_id: str, ensemble: PathEnsemble,
                             y: GridFunction, perturbation=None) -> np.ndarray:
    """Per-path quadratic cost int (||Q||^2 + ||U + V||^2) dt.

    Q_k = w_k sigma dy/dx(X_k); the control is the estimator's optimum plus
    `perturbation` (a constant or a callable (t, x, w) -> shift), so the
    second term reduces to the squared perturbation.
    """
    if estimator_id in ("sigma_obs", "sigma_obs_error"):
        lw = ensemble.log_weights_girsanov
    elif estimator_id == "pi_innovation":
        lw = ensemble.log_weights_innovation
    else:
        raise ValueError(f"cost functional undefined for {estimator_id!r}")
    if lw is None:
        raise ValueError("ensemble weight kind does not match the estimator")
    sigma = model.sigma
    grid = ensemble.grid
    dt = grid.dt
    K = grid.n_steps
    times = grid.times()
    cost = np.zeros(ensemble.n_paths)
    for k in range(K):
        xk = ensemble.states[:, k]
        w = np.exp(lw[:, k])
        q = w * sigma * y.eval_gradient(k, xk)
        total = q * q
        if perturbation is not None:
            if callable(perturbation):
                delta = np.asarray(perturbation(times[k], xk, w), dtype=float)
            else:
                delta = float(perturbation)
            total = total + np.square(delta) * np.ones_like(q)
        cost += total * dt
    return cost


def cost_functional(model, estimator_id: str, ensemble: PathEnsemble,
                    y: GridFunction, perturbation=None) -> float:
    """Ensemble average of the estimator's quadratic cost functional."""
    return float(cost_functional_per_path(
        model, estimator_id, ensemble, y, perturbation).mean())


def variance_decay(model, y: GridFunction, ensemble: PathEnsemble,
                   flavor: str = "sigma") -> VarianceDecayReport:
    """Backward-variance diagnostics.

    var_y[k] is the ensemble variance of w_k y_k(X_k); the Dirichlet-form
    right-hand side is sigma^2 E[(w dy/dx)^2] plus the centered square of
    w y h (sigma flavor) or w y (h - pi[h]) (pi flavor); cumulative_rhs is
    its left-point time integral.
    """
    if flavor == "sigma":
        lw = ensemble.log_weights_girsanov
        centered = False
    elif flavor == "pi":
        lw = ensemble.log_weights_innovation
        centered = True
    else:
        raise ValueError(f"unknown flavor {flavor!r}")
    if lw is None:
        raise ValueError("ensemble weight kind does not match the requested flavor")
    h_fn = _scalar_obs(model)
    grid = ensemble.grid
    K = grid.n_steps
    n = ensemble.n_paths
    sigma2 = model.sigma**2
    var_y = np.empty(K + 1)
    var_se = np.empty(K + 1)
    rhs = np.empty(K + 1)
    pih = ensemble.pi_h_path
    for k in range(K + 1):
        xk = ensemble.states[:, k]
        w = np.exp(lw[:, k])
        ytil = w * y.eval(k, xk)
        centered_y = ytil - ytil.mean()
        var_y[k] = np.dot(centered_y, centered_y) / (n - 1)
        m4 = np.mean(centered_y**4)
        var_se[k] = math.sqrt(max(m4 - var_y[k] ** 2, 0.0) / n)
        q = w * y.eval_gradient(k, xk)
        coeff = np.asarray(h_fn(xk), dtype=float)
        if centered:
            coeff = coeff - (pih[k] if k < K else pih[K - 1])
        v = w * y.eval(k, xk) * coeff
        v_centered = v - v.mean()
        rhs[k] = sigma2 * np.mean(q * q) + np.mean(v_centered * v_centered)
    cumulative = np.concatenate([[0.0], np.cumsum(rhs[:-1]) * grid.dt])
    return VarianceDecayReport(grid=grid, var_y=var_y, var_std_err=var_se,
                               dirichlet_rhs=rhs, cumulative_rhs=cumulative)
