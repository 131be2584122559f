"""Euler-Maruyama simulation of the forward SDE systems.

Simulates the signal/observation pair, weighted path ensembles under the
Girsanov change of measure (weights driven by the raw observations) and under
the innovation reweighting (mean-field weights driven by the innovation), and
computes innovation and observation-error processes.

Randomness is drawn from counter-based Philox streams keyed by
(seed, stream tag, path index), so results are bit-reproducible regardless of
scheduling or worker count.  Weights evolve in the log domain via the
exponential-martingale step, which is exact for observation maps that are
constant along a step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import GridMismatch, MissingTruthPath, SimulationDiverged, WeightCollapse
from .model import LinearGaussianModelSpec, ScalarModelSpec, TimeGrid

STATE_OVERFLOW = 1.0e8

# stream tags for the Philox key schedule
STREAM_TRUTH_STATE = 1
STREAM_TRUTH_OBS = 2
STREAM_GIRSANOV = 3
STREAM_INNOVATION = 4
STREAM_RESAMPLE = 5
STREAM_CONTROL_STATE = 6
STREAM_CONTROL_OBS = 7
STREAM_FILTER = 8


def path_generator(seed: int, stream: int, path_index: int) -> np.random.Generator:
    """Philox generator for one (seed, stream, path) triple."""
    key = np.array(
        [np.uint64(seed), (np.uint64(stream) << np.uint64(48)) | np.uint64(path_index)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def _ensemble_noise(seed: int, stream: int, n_paths: int, n_steps: int,
                    with_obs_noise: bool = False):
    """Per-path initial draws (uniform, normal) plus step normals.

    Returns (u0, z0, xi, eta) with shapes (N,), (N,), (N, n_steps) and
    optionally (N, n_steps) observation-channel normals (drawn after the
    state noise, in a fixed order).
    """
    u0 = np.empty(n_paths)
    z0 = np.empty(n_paths)
    xi = np.empty((n_paths, n_steps))
    eta = np.empty((n_paths, n_steps)) if with_obs_noise else None
    for i in range(n_paths):
        gen = path_generator(seed, stream, i)
        u0[i] = gen.random()
        z0[i] = gen.standard_normal()
        xi[i, :] = gen.standard_normal(n_steps)
        if with_obs_noise:
            eta[i, :] = gen.standard_normal(n_steps)
    return u0, z0, xi, eta


def _sample_prior(model, u0: np.ndarray, z0: np.ndarray) -> np.ndarray:
    prior = model.prior
    means = np.asarray(prior.means)
    sds = np.sqrt(np.asarray(prior.variances))
    edges = np.cumsum(np.asarray(prior.weights))
    idx = np.searchsorted(edges, u0, side="right").clip(0, len(means) - 1)
    return means[idx] + sds[idx] * z0


def _scalar_view(model) -> ScalarModelSpec:
    if isinstance(model, ScalarModelSpec):
        return model
    if isinstance(model, LinearGaussianModelSpec):
        return model.as_scalar()
    raise TypeError(f"unsupported model type {type(model).__name__}")


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservationRecord:
    """A simulated (or supplied) observation path on a time grid.

    Z is the cumulative observation with Z[0] = 0; dZ holds the per-step
    increments, so Z = [0, cumsum(dZ)] bitwise.  Synthetic records carry the
    truth path and the recoverable measurement-noise accumulation.
    """

    grid: TimeGrid
    Z: np.ndarray
    dZ: np.ndarray
    X_truth: np.ndarray | None = None
    noise_cum: np.ndarray | None = None
    innovation: np.ndarray | None = None
    obs_error: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.Z.shape[0] != self.grid.n_steps + 1:
            raise GridMismatch("Z must have n_steps + 1 entries")
        if self.dZ.shape[0] != self.grid.n_steps:
            raise GridMismatch("dZ must have n_steps entries")
        if np.any(np.atleast_1d(self.Z[0]) != 0.0):
            raise ValueError("Z must start at 0")

    def to_npz(self, path) -> None:
        data = {"t_end": self.grid.t_end, "n_steps": self.grid.n_steps,
                "Z": self.Z, "dZ": self.dZ}
        if self.X_truth is not None:
            data["X_truth"] = self.X_truth
        if self.noise_cum is not None:
            data["noise_cum"] = self.noise_cum
        if self.innovation is not None:
            data["innovation"] = self.innovation
        if self.obs_error is not None:
            data["obs_error"] = self.obs_error
        if self.seed is not None:
            data["seed"] = self.seed
        np.savez_compressed(path, **data)

    @staticmethod
    def from_npz(path) -> "ObservationRecord":
        with np.load(path) as data:
            grid = TimeGrid(float(data["t_end"]), int(data["n_steps"]))
            return ObservationRecord(
                grid=grid,
                Z=data["Z"],
                dZ=data["dZ"],
                X_truth=data["X_truth"] if "X_truth" in data else None,
                noise_cum=data["noise_cum"] if "noise_cum" in data else None,
                innovation=data["innovation"] if "innovation" in data else None,
                obs_error=data["obs_error"] if "obs_error" in data else None,
                seed=int(data["seed"]) if "seed" in data else None,
            )


@dataclass(frozen=True)
class PathEnsemble:
    """N simulated signal paths with optional log-weight processes.

    states has shape (N, n_steps + 1).  Weight processes are stored in the
    log domain (log-weight 0 at t = 0).  Innovation-weighted ensembles also
    record the realized mean-field path pi_h and the innovation increments
    they were driven by.
    """

    grid: TimeGrid
    states: np.ndarray
    log_weights_innovation: np.ndarray | None = None
    log_weights_girsanov: np.ndarray | None = None
    pi_h_path: np.ndarray | None = None
    innovation_increments: np.ndarray | None = None
    seed: int | None = None
    stream: int | None = None
    resample_steps: tuple = ()
    collapse_step: int | None = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def weights(self, kind: str, step: int | None = None) -> np.ndarray:
        lw = {"innovation": self.log_weights_innovation,
              "girsanov": self.log_weights_girsanov}[kind]
        if lw is None:
            raise ValueError(f"ensemble carries no {kind} weights")
        return np.exp(lw if step is None else lw[:, step])

    def to_npz(self, path) -> None:
        data = {"t_end": self.grid.t_end, "n_steps": self.grid.n_steps,
                "states": self.states}
        for name in ("log_weights_innovation", "log_weights_girsanov",
                     "pi_h_path", "innovation_increments"):
            val = getattr(self, name)
            if val is not None:
                data[name] = val
        if self.seed is not None:
            data["seed"] = self.seed
        if self.stream is not None:
            data["stream"] = self.stream
        data["resample_steps"] = np.array(self.resample_steps, dtype=int)
        np.savez_compressed(path, **data)

    @staticmethod
    def from_npz(path) -> "PathEnsemble":
        with np.load(path) as data:
            grid = TimeGrid(float(data["t_end"]), int(data["n_steps"]))
            get = lambda k: data[k] if k in data else None
            return PathEnsemble(
                grid=grid,
                states=data["states"],
                log_weights_innovation=get("log_weights_innovation"),
                log_weights_girsanov=get("log_weights_girsanov"),
                pi_h_path=get("pi_h_path"),
                innovation_increments=get("innovation_increments"),
                seed=int(data["seed"]) if "seed" in data else None,
                stream=int(data["stream"]) if "stream" in data else None,
                resample_steps=tuple(int(s) for s in data["resample_steps"]),
            )


def ensemble_ess(log_weights: np.ndarray) -> float:
    """Effective sample size (sum w)^2 / sum w^2 from log weights."""
    lw = log_weights - log_weights.max()
    w = np.exp(lw)
    s = w.sum()
    return float(s * s / np.dot(w, w))


# ---------------------------------------------------------------------------
# simulators
# ---------------------------------------------------------------------------

def _check_overflow(x) -> None:
    if np.any(np.abs(x) > STATE_OVERFLOW) or not np.all(np.isfinite(x)):
        raise SimulationDiverged(f"state exceeded {STATE_OVERFLOW:g}")


def simulate_truth_and_obs(model, grid: TimeGrid, seed: int,
                           drift_fn=None) -> ObservationRecord:
    """Simulate one signal path and its observation record.

    X_{k+1} = X_k + b(X_k) dt + sigma sqrt(dt) xi_k,
    Z_{k+1} = Z_k + h(X_k) dt + sqrt(dt) eta_k,  Z_0 = 0,  X_0 ~ prior.

    An optional drift_fn(k, x) overrides the model drift (controlled truth
    dynamics); supported on the scalar path only.
    """
    dt = grid.dt
    sqdt = np.sqrt(dt)
    K = grid.n_steps

    if isinstance(model, LinearGaussianModelSpec) and model.n_state > 1:
        if drift_fn is not None:
            raise ValueError("drift_fn override is supported on the scalar path only")
        n, m = model.n_state, model.n_obs
        gen_x = path_generator(seed, STREAM_TRUTH_STATE, 0)
        gen_z = path_generator(seed, STREAM_TRUTH_OBS, 0)
        L = np.linalg.cholesky(model.Sigma0 + 1e-300 * np.eye(n))
        X = np.empty((K + 1, n))
        X[0] = model.m0 + L @ gen_x.standard_normal(n)
        xi = gen_x.standard_normal((K, n))
        eta = gen_z.standard_normal((K, m))
        for k in range(K):
            X[k + 1] = X[k] + (model.A.T @ X[k]) * dt + model.sigma * sqdt * xi[k]
        _check_overflow(X)
        signal = (X[:-1] @ model.H) * dt
        dZ = signal + sqdt * eta
        noise_inc = dZ - signal
        Z = np.vstack([np.zeros((1, m)), np.cumsum(dZ, axis=0)])
        noise_cum = np.vstack([np.zeros((1, m)), np.cumsum(noise_inc, axis=0)])
        return ObservationRecord(grid=grid, Z=Z, dZ=dZ, X_truth=X,
                                 noise_cum=noise_cum, seed=seed)

    sm = _scalar_view(model)
    gen_x = path_generator(seed, STREAM_TRUTH_STATE, 0)
    gen_z = path_generator(seed, STREAM_TRUTH_OBS, 0)
    u0 = gen_x.random()
    z0 = gen_x.standard_normal()
    X = np.empty(K + 1)
    X[0] = _sample_prior(sm, np.array([u0]), np.array([z0]))[0]
    xi = gen_x.standard_normal(K)
    eta = gen_z.standard_normal(K)
    for k in range(K):
        b = sm.drift(X[k]) if drift_fn is None else float(drift_fn(k, X[k]))
        X[k + 1] = X[k] + b * dt + sm.sigma * sqdt * xi[k]
        if abs(X[k + 1]) > STATE_OVERFLOW:
            raise SimulationDiverged(f"state exceeded {STATE_OVERFLOW:g} at step {k + 1}")
    signal = np.asarray(sm.obs(X[:-1])) * dt
    dZ = signal + sqdt * eta
    noise_inc = dZ - signal
    Z = np.concatenate([[0.0], np.cumsum(dZ)])
    noise_cum = np.concatenate([[0.0], np.cumsum(noise_inc)])
    return ObservationRecord(grid=grid, Z=Z, dZ=dZ, X_truth=X,
                             noise_cum=noise_cum, seed=seed)


def _simulate_weighted_ensemble(
    model,
    grid: TimeGrid,
    obs: ObservationRecord | None,
    n_paths: int,
    seed: int,
    kind: str,
    pi_h_source="self",
    drift_fn=None,
    ess_floor: float | None = None,
):
    """Shared core for the Girsanov- and innovation-weighted ensembles.

    With obs=None every path draws its own fresh Brownian observation
    increments, realizing the reference measure where the driving channel is
    an independent Brownian motion (used by the martingale and
    unconditional-variance checks).
    """
    sm = _scalar_view(model)
    dt = grid.dt
    sqdt = np.sqrt(dt)
    K = grid.n_steps

    stream = STREAM_GIRSANOV if kind == "girsanov" else STREAM_INNOVATION
    fresh = obs is None
    u0, z0, xi, eta = _ensemble_noise(seed, stream, n_paths, K,
                                      with_obs_noise=fresh)
    if fresh:
        dZ_paths = sqdt * eta  # (N, K), independent per path
        dZ = None
    else:
        if not obs.grid.matches(grid):
            raise GridMismatch("observation record does not cover the requested grid")
        dZ = np.asarray(obs.dZ, dtype=float).reshape(K)
        dZ_paths = None
    X = np.empty((n_paths, K + 1))
    X[:, 0] = _sample_prior(sm, u0, z0)
    lw = np.zeros((n_paths, K + 1))

    external_pi_h = None
    if kind == "innovation" and not (isinstance(pi_h_source, str) and pi_h_source == "self"):
        external_pi_h = np.asarray(pi_h_source, dtype=float).reshape(-1)
        if external_pi_h.shape[0] == K + 1:
            external_pi_h = external_pi_h[:-1]
        if external_pi_h.shape[0] != K:
            raise GridMismatch("pi_h source must have n_steps or n_steps + 1 entries")

    pi_h_path = np.empty(K) if kind == "innovation" else None
    dI = np.empty(K) if kind == "innovation" and not fresh else None
    collapse_step = None
    floor = (ess_floor if ess_floor is not None else 0.0) * n_paths

    for k in range(K):
        xk = X[:, k]
        hk = np.asarray(sm.obs(xk), dtype=float)
        dz_k = dZ_paths[:, k] if fresh else dZ[k]
        if kind == "girsanov":
            lw[:, k + 1] = lw[:, k] + hk * dz_k - 0.5 * hk * hk * dt
        else:
            if external_pi_h is not None:
                pih = external_pi_h[k]
            else:
                w = np.exp(lw[:, k] - lw[:, k].max())
                pih = float(np.dot(w, hk) / w.sum())
            pi_h_path[k] = pih
            di_k = dz_k - pih * dt
            if not fresh:
                dI[k] = di_k
            centered = hk - pih
            lw[:, k + 1] = lw[:, k] + centered * di_k - 0.5 * centered * centered * dt
        b = np.asarray(sm.drift(xk), dtype=float) if drift_fn is None else \
            np.asarray(drift_fn(k, xk), dtype=float)
        X[:, k + 1] = xk + b * dt + sm.sigma * sqdt * xi[:, k]
        if np.any(np.abs(X[:, k + 1]) > STATE_OVERFLOW):
            raise SimulationDiverged(f"ensemble state exceeded {STATE_OVERFLOW:g} at step {k + 1}")
        if floor > 0 and collapse_step is None:
            if ensemble_ess(lw[:, k + 1]) < floor:
                collapse_step = k + 1
                warnings.warn(
                    f"effective sample size fell below {floor:g} at step {k + 1}",
                    WeightCollapse,
                )
    if not np.all(np.isfinite(lw)):
        raise SimulationDiverged("log-weights became non-finite")

    return PathEnsemble(
        grid=grid,
        states=X,
        log_weights_innovation=lw if kind == "innovation" else None,
        log_weights_girsanov=lw if kind == "girsanov" else None,
        pi_h_path=pi_h_path,
        innovation_increments=dI,
        seed=seed,
        stream=stream,
        collapse_step=collapse_step,
    )


def simulate_girsanov_ensemble(model, grid, obs, n_paths, seed,
                               ess_floor=None) -> PathEnsemble:
    """N independent signal paths with Girsanov log-weights.

    d(log w) = h(X) dZ - 0.5 h(X)^2 dt along the given observation record;
    obs=None replaces the record by fresh per-path Brownian increments
    (the reference-measure law, under which the weights are a martingale).
    """
    return _simulate_weighted_ensemble(
        model, grid, obs, n_paths, seed, "girsanov", ess_floor=ess_floor
    )


def simulate_innovation_ensemble(model, grid, obs, n_paths, seed,
                                 pi_h_source="self", drift_fn=None,
                                 ess_floor=None) -> PathEnsemble:
    """N signal paths with mean-field innovation log-weights.

    d(log w) = (h - pi[h]) dI - 0.5 (h - pi[h])^2 dt with
    dI = dZ - pi[h] dt.  pi_h_source is either "self" (self-normalized
    ensemble average, the mean-field closure) or an explicit pi[h] path, e.g.
    from a Kalman-Bucy run.  An optional drift_fn(k, x) overrides the model
    drift (controlled dynamics).  obs=None drives each path with its own
    fresh Brownian innovation increments.
    """
    return _simulate_weighted_ensemble(
        model, grid, obs, n_paths, seed, "innovation",
        pi_h_source=pi_h_source, drift_fn=drift_fn, ess_floor=ess_floor,
    )


# ---------------------------------------------------------------------------
# derived processes
# ---------------------------------------------------------------------------

def compute_innovation(obs: ObservationRecord, pi_h_path) -> np.ndarray:
    """Innovation path I_k = Z_k - sum_{j<k} pi_h_j dt (left-point sum)."""
    K = obs.grid.n_steps
    pih = np.asarray(pi_h_path, dtype=float).reshape(-1)
    if pih.shape[0] == K + 1:
        pih = pih[:-1]
    if pih.shape[0] != K:
        raise GridMismatch("pi_h path must have n_steps or n_steps + 1 entries")
    dI = np.asarray(obs.dZ).reshape(K) - pih * obs.grid.dt
    return np.concatenate([[0.0], np.cumsum(dI)])


def compute_observation_error(model, obs: ObservationRecord) -> np.ndarray:
    """Observation-error path W_k = Z_k - sum_{j<k} h(X_j) dt.

    Requires the synthetic truth path; for simulator output this reproduces
    the stored measurement-noise accumulation bit-exactly.
    """
    if obs.X_truth is None:
        raise MissingTruthPath("observation record carries no truth path")
    K = obs.grid.n_steps
    X = obs.X_truth
    if X.ndim == 1:
        signal = np.asarray(model.obs(X[:-1]), dtype=float) * obs.grid.dt
        dW = np.asarray(obs.dZ).reshape(K) - signal
        return np.concatenate([[0.0], np.cumsum(dW)])
    signal = np.asarray(model.obs(X[:-1]), dtype=float) * obs.grid.dt
    dW = np.asarray(obs.dZ) - signal
    m = dW.shape[1]
    return np.vstack([np.zeros((1, m)), np.cumsum(dW, axis=0)])


def with_scaled_initial_weights(ensemble: PathEnsemble, scale: float) -> PathEnsemble:
    """Copy of an ensemble with every weight process multiplied by `scale`.

    Testing hook for the weight-linearity property of the estimators.
    """
    shift = np.log(scale)
    kwargs = {}
    if ensemble.log_weights_innovation is not None:
        kwargs["log_weights_innovation"] = ensemble.log_weights_innovation + shift
    if ensemble.log_weights_girsanov is not None:
        kwargs["log_weights_girsanov"] = ensemble.log_weights_girsanov + shift
    return replace(ensemble, **kwargs)
