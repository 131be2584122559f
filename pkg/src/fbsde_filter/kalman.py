"""Kalman-Bucy filter, filter Riccati equation, and LQ control Riccati.

These are the exact linear-Gaussian oracles used to validate the Monte Carlo
estimators.  Conventions match drift b(x) = A^T x and observation
h(x) = H^T x with unit observation noise: the covariance obeys

    dSigma/dt = A^T Sigma + Sigma A + sigma^2 I - Sigma H H^T Sigma,

and the filtered mean is stepped as

    m_{k+1} = m_k + A^T m_k dt + Sigma_k H (dZ_k - H^T m_k dt).

The transpose conventions are pinned by the cross-module consistency tests
rather than assumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch, RiccatiBlowup
from .io import write_csv
from .model import LinearGaussianModelSpec, TimeGrid
from .sde_sim import ObservationRecord

RICCATI_OVERFLOW = 1.0e8


@dataclass(frozen=True)
class GaussianState:
    """Time-indexed mean and covariance of the Kalman-Bucy filter."""

    grid: TimeGrid
    mean: np.ndarray        # (n_steps + 1, n)
    covariance: np.ndarray  # (n_steps + 1, n, n)
    innovation: np.ndarray | None = None  # realized innovation path (n_steps + 1, m)

    @property
    def n_state(self) -> int:
        return self.mean.shape[1]

    def to_csv(self, path) -> None:
        n = self.n_state
        header = (["t"] + [f"m_{i + 1}" for i in range(n)]
                  + [f"sigma_{i + 1}{j + 1}" for i in range(n) for j in range(n)])
        times = self.grid.times()
        rows = (
            np.concatenate([[times[k]], self.mean[k], self.covariance[k].reshape(-1)])
            for k in range(len(times))
        )
        write_csv(path, header, rows)


@dataclass(frozen=True)
class ControlRiccati:
    """Backward LQ value Hessian path P_t with gains K_t = G^T P_t.

    value_offset carries the noise contribution r_t
    (-dr/dt = sigma^2/2 tr P_t, r_T = 0) so that the full quadratic value is
    0.5 x^T P_t x + r_t.
    """

    grid: TimeGrid
    P: np.ndarray            # (n_steps + 1, n, n)
    gains: np.ndarray        # (n_steps + 1, p, n)
    value_offset: np.ndarray  # (n_steps + 1,)

    def value(self, k: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.P.shape[1] == 1:
            return 0.5 * float(self.P[k, 0, 0]) * x * x + self.value_offset[k]
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.P[k], x) + self.value_offset[k]


def _symmetrize(S):
    return 0.5 * (S + S.T)


def _clip_psd(path: np.ndarray) -> np.ndarray:
    """Clip eigenvalues below -1e-10 to zero along a covariance path."""
    n = path.shape[1]
    if n == 1:
        out = path.copy()
        neg = out[:, 0, 0] < 0.0
        out[neg] = 0.0
        return out
    out = path.copy()
    for k in range(out.shape[0]):
        w, V = np.linalg.eigh(out[k])
        if w.min() < 0.0:
            out[k] = (V * np.maximum(w, 0.0)) @ V.T
    return out


def riccati_filter(A, H, sigma: float, Sigma0, grid: TimeGrid) -> np.ndarray:
    """Integrate the filter covariance ODE with classical Runge-Kutta.

    Returns the covariance path of shape (n_steps + 1, n, n); symmetry is
    enforced after every step.  Stiff initial transients (large observation
    gains) are handled by automatic substepping based on the local Jacobian
    scale 2(||A|| + ||H H^T|| ||Sigma||).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = A.shape[0]
    S = _symmetrize(np.atleast_2d(np.asarray(Sigma0, dtype=float)).copy())
    HHt = H @ H.T
    Q = sigma * sigma * np.eye(n)
    dt = grid.dt
    norm_A = np.linalg.norm(A, 2)
    norm_HHt = np.linalg.norm(HHt, 2)

    def rate(S):
        return A.T @ S + S @ A + Q - S @ HHt @ S

    def rk4(S, h):
        k1 = rate(S)
        k2 = rate(S + 0.5 * h * k1)
        k3 = rate(S + 0.5 * h * k2)
        k4 = rate(S + h * k3)
        return _symmetrize(S + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))

    path = np.empty((grid.n_steps + 1, n, n))
    path[0] = S
    for k in range(grid.n_steps):
        stiffness = 2.0 * (norm_A + norm_HHt * np.linalg.norm(S, 2))
        n_sub = max(1, int(np.ceil(4.0 * dt * stiffness)))
        for _ in range(n_sub):
            S = rk4(S, dt / n_sub)
        if np.any(np.abs(S) > RICCATI_OVERFLOW):
            raise RiccatiBlowup(f"covariance entry exceeded {RICCATI_OVERFLOW:g}")
        path[k + 1] = S
    return _clip_psd(path)


def kalman_bucy_mean(A, H, Sigma_path, m0, obs: ObservationRecord) -> GaussianState:
    """Run the Kalman-Bucy mean recursion along an observation record.

    Emits the realized innovation path alongside the Gaussian state.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = A.shape[0]
    m_obs = H.shape[1]
    Sigma = np.asarray(Sigma_path, dtype=float)
    K = obs.grid.n_steps
    if Sigma.ndim == 1:
        Sigma = Sigma.reshape(-1, 1, 1)
    if Sigma.shape[0] != K + 1:
        raise GridMismatch("Sigma path and observation record use different grids")
    dZ = np.asarray(obs.dZ, dtype=float).reshape(K, m_obs)
    dt = obs.grid.dt

    mean = np.empty((K + 1, n))
    mean[0] = np.asarray(m0, dtype=float).reshape(n)
    innovation = np.zeros((K + 1, m_obs))
    for k in range(K):
        m = mean[k]
        dI = dZ[k] - (H.T @ m) * dt
        innovation[k + 1] = innovation[k] + dI
        mean[k + 1] = m + (A.T @ m) * dt + Sigma[k] @ (H @ dI)
    return GaussianState(grid=obs.grid, mean=mean, covariance=Sigma,
                         innovation=innovation)


def lq_control_riccati(A, G, terminal_hessian, grid: TimeGrid,
                       sigma: float = 0.0) -> ControlRiccati:
    """Backward LQ Riccati for drift b(x, a) = A^T x + G a and cost
    0.5 ||a||^2 + 0.5 x^T Q_f x:

        -dP/dt = A P + P A^T - P G G^T P,  P_T = Q_f,

    with gain K_t = G^T P_t and policy a_t(x) = -K_t x.  When sigma is given,
    the additive value offset r_t (-dr/dt = sigma^2/2 tr P) is integrated as
    well.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    n = A.shape[0]
    Qf = _symmetrize(np.atleast_2d(np.asarray(terminal_hessian, dtype=float)))
    GGt = G @ G.T
    dt = grid.dt
    K = grid.n_steps

    def rate(P):
        # forward-time derivative dP/dt, integrated backward
        return -(A @ P + P @ A.T - P @ GGt @ P)

    path = np.empty((K + 1, n, n))
    path[K] = Qf
    P = Qf.copy()
    for k in range(K - 1, -1, -1):
        k1 = rate(P)
        k2 = rate(P - 0.5 * dt * k1)
        k3 = rate(P - 0.5 * dt * k2)
        k4 = rate(P - dt * k3)
        P = _symmetrize(P - dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        if np.any(np.abs(P) > RICCATI_OVERFLOW):
            raise RiccatiBlowup(f"Riccati entry exceeded {RICCATI_OVERFLOW:g}")
        path[k] = P
    gains = np.einsum("ij,kjl->kil", G.T, path)
    trace = 0.5 * sigma * sigma * np.trace(path, axis1=1, axis2=2)
    offset = np.zeros(K + 1)
    if sigma:
        # reverse cumulative trapezoid of the trace term
        increments = 0.5 * dt * (trace[:-1] + trace[1:])
        offset[:-1] = increments[::-1].cumsum()[::-1]
    return ControlRiccati(grid=grid, P=path, gains=gains, value_offset=offset)


def model_riccati(model: LinearGaussianModelSpec, grid: TimeGrid) -> np.ndarray:
    return riccati_filter(model.A, model.H, model.sigma, model.Sigma0, grid)


def model_kalman(model: LinearGaussianModelSpec, obs: ObservationRecord,
                 Sigma_path: np.ndarray | None = None) -> GaussianState:
    if Sigma_path is None:
        Sigma_path = model_riccati(model, obs.grid)
    return kalman_bucy_mean(model.A, model.H, Sigma_path, model.m0, obs)
