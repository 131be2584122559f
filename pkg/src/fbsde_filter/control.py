"""Partially observed optimal control built on the estimator machinery.

Provides the HJB state-control law, certainty-equivalence closed-loop runs
(control = filtered mean of the state policy), the separated-cost estimator
driven by the innovation ensemble, the linear-Gaussian alternating
filter/control iteration, and the consistency identity linking the running
cost h * alpha to the observation-based estimator of pi_T[f].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import FilterDivergence, GridMismatch, IterationNotConverged
from .estimators import (
    EstimatorReport,
    _weighted_fold,
    closed_loop_dual_controls,
    prior_expectation_of_initial_slice,
)
from .io import write_csv
from .kalman import lq_control_riccati, model_riccati
from .model import LinearGaussianModelSpec, ScalarModelSpec, SpaceGrid, TimeGrid
from .pde_backward import GridFunction, solve_hjb_quadratic
from .sde_sim import (
    STREAM_CONTROL_OBS,
    STREAM_CONTROL_STATE,
    STREAM_FILTER,
    STREAM_RESAMPLE,
    ObservationRecord,
    PathEnsemble,
    _sample_prior,
    path_generator,
)


@dataclass(frozen=True)
class PolicyField:
    """A state-feedback control law a_t(x) on the time grid.

    Either a gain path (a_t(x) = -K_t x, provenance "lq_riccati") or a
    space-time grid of control values (provenance "hjb"), or zero.
    """

    time_grid: TimeGrid
    provenance: str
    values: np.ndarray | None = None      # (n_steps + 1, n_points)
    space_grid: SpaceGrid | None = None
    gains: np.ndarray | None = None       # (n_steps + 1, p, n)

    def policy_at(self, k: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.provenance == "zero":
            return np.zeros_like(x)
        if self.gains is not None:
            if self.gains.shape[1] == 1 and self.gains.shape[2] == 1 and x.ndim <= 1:
                return -float(self.gains[k, 0, 0]) * x
            return -(x @ self.gains[k].T)
        return np.interp(x, self.space_grid.points(), self.values[k])

    @staticmethod
    def zero(time_grid: TimeGrid) -> "PolicyField":
        return PolicyField(time_grid=time_grid, provenance="zero")

    @staticmethod
    def from_gains(time_grid: TimeGrid, gains: np.ndarray) -> "PolicyField":
        return PolicyField(time_grid=time_grid, provenance="lq_riccati", gains=gains)


@dataclass(frozen=True)
class ControlRunReport:
    """Outcome of one control experiment."""

    realized_cost: float | None = None
    separated_cost_estimate: float | None = None
    mc_std_err: float | None = None
    mu_y0: float | None = None
    filter_trace: np.ndarray | None = None
    seed: int | None = None

    def csv_row(self):
        blank = lambda v: "" if v is None else v
        return (blank(self.seed), blank(self.realized_cost),
                blank(self.separated_cost_estimate), blank(self.mu_y0))

    @staticmethod
    def csv_header():
        return ["seed", "realized_cost", "separated_cost_estimate", "mu_y0"]


# ---------------------------------------------------------------------------
# HJB policy
# ---------------------------------------------------------------------------

def hjb_policy(model: ScalarModelSpec, space_grid: SpaceGrid, time_grid: TimeGrid,
               terminal=None):
    """Optimal state control for additive control and quadratic running cost.

    Returns (PolicyField, value GridFunction) with a_t(x) = -g dy/dx.
    """
    value, policy_values = solve_hjb_quadratic(model, space_grid, time_grid,
                                               terminal=terminal)
    field = PolicyField(time_grid=time_grid, provenance="hjb",
                        values=policy_values, space_grid=space_grid)
    return field, value


# ---------------------------------------------------------------------------
# certainty-equivalence closed loop
# ---------------------------------------------------------------------------

def _policy_filter_mean_lg(policy: PolicyField, k: int, mean: np.ndarray,
                           var: float, quad):
    """pi_t[a_t] for a Gaussian filter state (vectorized over runs)."""
    if policy.provenance == "zero":
        return np.zeros((mean.shape[0], 1))
    if policy.gains is not None:
        return -np.einsum("pn,sn->sp", policy.gains[k], mean)
    nodes, wts = quad
    xq = mean[:, 0][:, None] + math.sqrt(2.0 * max(var, 0.0)) * nodes[None, :]
    aq = np.interp(xq.ravel(), policy.space_grid.points(), policy.values[k])
    return (aq.reshape(xq.shape) @ wts)[:, None]


def certainty_equivalence_batch(model: LinearGaussianModelSpec,
                                policy: PolicyField, grid: TimeGrid,
                                seeds, terminal_hessian) -> tuple[np.ndarray, np.ndarray]:
    """Closed-loop runs alpha_t = pi_t[a_t] with a Kalman-Bucy filter.

    Vectorized across seeds; every seed draws from its own noise streams so
    batched and single runs are bit-identical.  Returns (realized costs,
    filter mean trace of the first seed).
    """
    seeds = list(seeds)
    S = len(seeds)
    n = model.n_state
    m_obs = model.n_obs
    p = model.G.shape[1]
    K = grid.n_steps
    dt = grid.dt
    sqdt = math.sqrt(dt)
    Qf = np.atleast_2d(np.asarray(terminal_hessian, dtype=float))

    Sigma = model_riccati(model, grid)
    quad = hermgauss(64)
    quad = (quad[0], quad[1] / math.sqrt(math.pi))

    # per-seed noise; state stream also carries the prior draw
    X = np.empty((S, n))
    xi = np.empty((S, K, n))
    eta = np.empty((S, K, m_obs))
    L0 = np.linalg.cholesky(model.Sigma0 + 1e-15 * np.eye(n))
    for s, seed in enumerate(seeds):
        gx = path_generator(seed, STREAM_CONTROL_STATE, 0)
        gz = path_generator(seed, STREAM_CONTROL_OBS, 0)
        X[s] = model.m0 + L0 @ gx.standard_normal(n)
        xi[s] = gx.standard_normal((K, n))
        eta[s] = gz.standard_normal((K, m_obs))

    m = np.tile(model.m0, (S, 1))
    cost = np.zeros(S)
    trace = np.empty((K + 1, n))
    trace[0] = m[0]
    A_T = model.A.T
    H = model.H
    G = model.G
    for k in range(K):
        alpha = _policy_filter_mean_lg(policy, k, m, float(Sigma[k][0, 0]), quad)
        cost += 0.5 * np.einsum("sp,sp->s", alpha, alpha) * dt
        drift_truth = X @ model.A + alpha @ G.T
        dZ = (X @ H) * dt + sqdt * eta[:, k, :]
        X = X + drift_truth * dt + model.sigma * sqdt * xi[:, k, :]
        dI = dZ - (m @ H) * dt
        m = m + (m @ model.A + alpha @ G.T) * dt + dI @ (Sigma[k] @ H).T
        trace[k + 1] = m[0]
    cost += 0.5 * np.einsum("si,ij,sj->s", X, Qf, X)
    return cost, trace


def certainty_equivalence_run(model, policy: PolicyField, grid: TimeGrid,
                              seed: int, terminal_hessian=None,
                              terminal_cost=None, filter_particles: int = 1000,
                              ess_floor: float = 0.1) -> ControlRunReport:
    """One closed-loop certainty-equivalence run.

    Linear-Gaussian models use the Kalman-Bucy filter (terminal cost
    0.5 x^T Q_f x); scalar models use a resampling particle filter and a
    callable terminal cost (defaulting to the model terminal function).
    """
    if isinstance(model, LinearGaussianModelSpec):
        if terminal_hessian is None:
            raise ValueError("linear-Gaussian control runs need terminal_hessian")
        costs, trace = certainty_equivalence_batch(model, policy, grid, [seed],
                                                   terminal_hessian)
        return ControlRunReport(realized_cost=float(costs[0]), filter_trace=trace,
                                seed=seed)
    return _ce_run_particle(model, policy, grid, seed, terminal_cost,
                            filter_particles, ess_floor)


def _ce_run_particle(model: ScalarModelSpec, policy, grid, seed, terminal_cost,
                     n_particles, ess_floor):
    dt = grid.dt
    sqdt = math.sqrt(dt)
    K = grid.n_steps
    g = model.control_gain
    f_cost = terminal_cost if terminal_cost is not None else model.terminal

    gen_x = path_generator(seed, STREAM_CONTROL_STATE, 0)
    gen_z = path_generator(seed, STREAM_CONTROL_OBS, 0)
    gen_f = path_generator(seed, STREAM_FILTER, 0)
    gen_r = path_generator(seed, STREAM_RESAMPLE, 0)
    x_truth = float(_sample_prior(model, np.array([gen_x.random()]),
                                  np.array([gen_x.standard_normal()]))[0])
    xi = gen_x.standard_normal(K)
    eta = gen_z.standard_normal(K)
    particles = _sample_prior(model, gen_f.random(n_particles),
                              gen_f.standard_normal(n_particles))
    lw = np.zeros(n_particles)
    pf_noise = gen_f.standard_normal((K, n_particles))

    cost = 0.0
    trace = np.empty(K + 1)
    for k in range(K):
        w = np.exp(lw - lw.max())
        wsum = w.sum()
        trace[k] = float(np.dot(w, particles) / wsum)
        a_part = policy.policy_at(k, particles)
        alpha = float(np.dot(w, a_part) / wsum)
        cost += 0.5 * alpha * alpha * dt
        dZ = model.obs(x_truth) * dt + sqdt * eta[k]
        x_truth = x_truth + (model.drift(x_truth) + g * alpha) * dt + model.sigma * sqdt * xi[k]
        hk = np.asarray(model.obs(particles), dtype=float)
        lw = lw + hk * dZ - 0.5 * hk * hk * dt
        particles = particles + (np.asarray(model.drift(particles), dtype=float)
                                 + g * alpha) * dt + model.sigma * sqdt * pf_noise[k]
        w = np.exp(lw - lw.max())
        wsum = w.sum()
        ess = wsum * wsum / np.dot(w, w)
        if ess < 1.0 + 1e-9:
            raise FilterDivergence("particle filter collapsed to a single path")
        if ess < ess_floor * n_particles:
            counts = gen_r.multinomial(n_particles, w / wsum)
            particles = np.repeat(particles, counts)
            lw = np.zeros(n_particles)
    w = np.exp(lw - lw.max())
    trace[K] = float(np.dot(w, particles) / w.sum())
    cost += float(f_cost(x_truth))
    return ControlRunReport(realized_cost=cost, filter_trace=trace, seed=seed)


# ---------------------------------------------------------------------------
# separated cost estimator
# ---------------------------------------------------------------------------

def separated_cost_estimate(model: ScalarModelSpec, policy: PolicyField,
                            obs: ObservationRecord, ensemble: PathEnsemble,
                            y_value: GridFunction) -> ControlRunReport:
    """Estimate the conditional (separated) cost of a fixed Markov policy.

    y_value must be the policy-evaluation backward solution (running cost
    included) for the same policy, and the ensemble must have been simulated
    under the controlled drift.  The estimate is
    mu[y_0] + sum_k mean_i( w_ik y_k(X_ik) (h - pi_k[h]) ) dI_k; its average
    over observation records is the unconditional cost mu[y_0].
    """
    if ensemble.innovation_increments is None:
        raise GridMismatch("separated cost needs an innovation-weighted ensemble")
    acc, _control = _weighted_fold(model, obs, y_value, ensemble, "innovation",
                                   True, ensemble.innovation_increments)
    mu = prior_expectation_of_initial_slice(model, y_value)
    n = ensemble.n_paths
    return ControlRunReport(
        separated_cost_estimate=float(mu + acc.mean()),
        mc_std_err=float(acc.std(ddof=1) / math.sqrt(n)),
        mu_y0=float(mu),
        seed=ensemble.seed,
    )


# ---------------------------------------------------------------------------
# linear-Gaussian alternating iteration and identities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LqgIterationResult:
    gains: np.ndarray            # (n_steps + 1, p, n)
    P: np.ndarray                # (n_steps + 1, n, n)
    filter_trace: np.ndarray | None
    convergence: tuple           # per-sweep max gain change
    n_sweeps: int


def _policy_value_path(A, G, gains, Qf, grid: TimeGrid) -> np.ndarray:
    """Backward Lyapunov solve for the value Hessian of a fixed linear law.

    -dP/dt = F^T P + P F + K^T K with F = A^T - G K, P_T = Q_f; RK4 with the
    gain path interpolated linearly at half steps.
    """
    K_steps = grid.n_steps
    dt = grid.dt
    P = np.atleast_2d(np.asarray(Qf, dtype=float)).copy()
    out = np.empty((K_steps + 1,) + P.shape)
    out[K_steps] = P

    def rate(P, Kg):
        F = A.T - G @ Kg
        return -(F.T @ P + P @ F + Kg.T @ Kg)

    for k in range(K_steps - 1, -1, -1):
        K_right = gains[k + 1]
        K_left = gains[k]
        K_mid = 0.5 * (K_left + K_right)
        k1 = rate(P, K_right)
        k2 = rate(P - 0.5 * dt * k1, K_mid)
        k3 = rate(P - 0.5 * dt * k2, K_mid)
        k4 = rate(P - dt * k3, K_left)
        P = P - dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        P = 0.5 * (P + P.T)
        out[k] = P
    return out


def lqg_alternating_iteration(model: LinearGaussianModelSpec, grid: TimeGrid,
                              terminal_hessian, obs: ObservationRecord | None = None,
                              tol: float = 1e-6, max_sweeps: int = 20) -> LqgIterationResult:
    """Alternate filtering and backward value/gain recomputation.

    Sweep: (i) run the Kalman-Bucy mean under the current linear law along
    the observation record (the filter trace), (ii) evaluate the law's value
    Hessian backward and improve the gains via K = G^T P.  Converged gains
    equal the certainty-equivalence LQ Riccati gains.
    """
    A, G = model.A, model.G
    n = model.n_state
    p = G.shape[1]
    K_steps = grid.n_steps
    gains = np.zeros((K_steps + 1, p, n))
    Sigma = model_riccati(model, grid)
    trace = None
    convergence = []
    P = None
    for sweep in range(max_sweeps):
        if obs is not None:
            trace = _kalman_trace_under_law(model, Sigma, gains, obs)
        P = _policy_value_path(A, G, gains, terminal_hessian, grid)
        new_gains = np.einsum("ij,kjl->kil", G.T, P)
        change = float(np.max(np.abs(new_gains - gains)))
        convergence.append(change)
        gains = new_gains
        if change < tol:
            return LqgIterationResult(gains=gains, P=P, filter_trace=trace,
                                      convergence=tuple(convergence),
                                      n_sweeps=sweep + 1)
    raise IterationNotConverged(
        f"gain change {convergence[-1]:.3e} after {max_sweeps} sweeps"
    )


def _kalman_trace_under_law(model, Sigma, gains, obs):
    K = obs.grid.n_steps
    dt = obs.grid.dt
    n = model.n_state
    dZ = np.asarray(obs.dZ, dtype=float).reshape(K, model.n_obs)
    m = model.m0.copy()
    trace = np.empty((K + 1, n))
    trace[0] = m
    for k in range(K):
        alpha = -(gains[k] @ m)
        dI = dZ[k] - (model.H.T @ m) * dt
        m = m + (model.A.T @ m + model.G @ alpha) * dt + Sigma[k] @ (model.H @ dI)
        trace[k + 1] = m
    return trace


def lqg_optimal_cost(model: LinearGaussianModelSpec, terminal_hessian,
                     grid: TimeGrid) -> float:
    """Closed-form expected cost of the certainty-equivalence LQG loop.

    0.5 m0^T P_0 m0 + 0.5 int tr(H^T Sigma P Sigma H) dt
    + 0.5 tr(Q_f Sigma_T), assembled from the control and filter Riccati
    solutions (trapezoidal time integral).
    """
    ric = lq_control_riccati(model.A, model.G, terminal_hessian, grid,
                             sigma=model.sigma)
    Sigma = model_riccati(model, grid)
    H = model.H
    HtS = np.einsum("ji,kjl->kil", H, Sigma)        # (K+1, m, n) = H^T Sigma
    SH = np.einsum("kij,jl->kil", Sigma, H)         # (K+1, n, m) = Sigma H
    integrand = np.einsum("kij,kjl,kli->k", HtS, ric.P, SH)  # tr(H^T S P S H)
    dt = grid.dt
    trapezoid = 0.5 * dt * (integrand[:-1] + integrand[1:]).sum()
    integral = 0.5 * trapezoid
    Qf = np.atleast_2d(np.asarray(terminal_hessian, dtype=float))
    return float(
        0.5 * model.m0 @ (ric.P[0] @ model.m0)
        + integral
        + 0.5 * np.trace(Qf @ Sigma[-1])
    )


def full_information_lq_cost(model: LinearGaussianModelSpec, terminal_hessian,
                             grid: TimeGrid) -> float:
    """Expected LQ cost when the state is observed exactly (prior-averaged)."""
    ric = lq_control_riccati(model.A, model.G, terminal_hessian, grid,
                             sigma=model.sigma)
    return float(
        0.5 * model.m0 @ (ric.P[0] @ model.m0)
        + 0.5 * np.trace(ric.P[0] @ model.Sigma0)
        + ric.value_offset[0]
    )


def remark_consistency_check(model: LinearGaussianModelSpec,
                             obs: ObservationRecord,
                             alpha: str = "optimal") -> float:
    """Residual of the running-cost identity recovering pi_T[f].

    Computes |f_bar^T m_T - (ybar_0^T m_0 - sum alpha_k^T pi_k[h] dt
    + sum (ybar_{k+1}^T Sigma_k H) dI_k)| with alpha the closed-loop control
    (alpha="optimal") or zero (alpha="zero", reducing to the averaged
    innovation estimator identity).  All quantities come from the Kalman-Bucy
    closed forms on the observation grid.
    """
    from .kalman import model_kalman

    grid = obs.grid
    dt = grid.dt
    K = grid.n_steps
    Sigma = model_riccati(model, grid)
    state = model_kalman(model, obs, Sigma)
    dI = np.diff(state.innovation, axis=0)

    if alpha == "optimal":
        ybar, u = closed_loop_dual_controls(model.A, model.H, Sigma, model.f_bar, grid)
        alpha_path = u
    elif alpha == "zero":
        # open-loop dual recursion
        n = model.n_state
        ybar = np.empty((K + 1, n))
        ybar[K] = model.f_bar
        for k in range(K - 1, -1, -1):
            ybar[k] = ybar[k + 1] + dt * (model.A @ ybar[k + 1])
        alpha_path = np.zeros((K, model.G.shape[1] if model.G is not None else 1))
    else:
        raise ValueError(f"unknown alpha mode {alpha!r}")

    pi_h = state.mean @ model.H  # (K+1, m)
    integrand_dI = np.einsum("kn,knl,lm->km", ybar[1:], Sigma[:-1], model.H)
    rhs = float(ybar[0] @ model.m0)
    if alpha == "optimal":
        rhs -= float(np.einsum("km,km->", alpha_path, pi_h[:-1])) * dt
    rhs += float(np.einsum("km,km->", integrand_dI, dI))
    lhs = float(model.f_bar @ state.mean[-1])
    return abs(lhs - rhs)


def control_reports_to_csv(path, reports) -> None:
    write_csv(path, ControlRunReport.csv_header(),
              (r.csv_row() for r in reports))
