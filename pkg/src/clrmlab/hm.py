"""History matching by randomized maximum likelihood on the PCA latent.

Each posterior sample minimizes a perturbed data mismatch plus a prior
anchor: (d_sim - d*)' C_d^-1 (d_sim - d*) + (xi - xi*)' (xi - xi*), where d*
adds fresh Gaussian noise to the observations and xi* is a fresh prior draw.
Minimization is Levenberg-Marquardt on the stacked residual with a
forward-difference Jacobian over the latent; the forward model is whatever
callable the caller supplies (the two-phase simulator in production, a
linear map in the oracle tests).

Observation vector ordering: injector-water streams, then producer-oil, then
producer-water, wells in declaration order, times ascending within a stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geostat import Geomodel, PcaBasis, pca_to_model
from .resim import RateSeries
from .seeds import seed_tuple, stream as _rng_stream

NOISE_FRACTION = 0.02
NOISE_FLOOR = 0.5  # m3/day; keeps C_d invertible for pre-breakthrough zeros


@dataclass
class ObservationSet:
    times: np.ndarray         # observation days, ascending
    stream_names: list
    values: np.ndarray        # perturbed observations, stream-major
    sd: np.ndarray            # per-datum noise standard deviation

    def __post_init__(self):
        if np.any(self.sd <= 0):
            raise ValueError("observation standard deviations must be > 0")
        n = len(self.stream_names) * len(self.times)
        if self.values.shape != (n,) or self.sd.shape != (n,):
            raise ValueError("observation vector length mismatch")

    @property
    def n_obs(self) -> int:
        return len(self.values)


def extract_observations(rates: RateSeries, obs_times) -> np.ndarray:
    """Flatten the rate streams at the given report times, stream-major."""
    obs_times = np.asarray(obs_times, dtype=np.float64)
    cols = np.searchsorted(rates.report_times, obs_times)
    if not np.allclose(rates.report_times[cols], obs_times):
        raise ValueError("observation times must be report times")
    return rates.streams()[:, cols].ravel()


def observation_times(window_days: float, interval_days: float = 90.0) -> np.ndarray:
    """Observation marks: every `interval_days` in (0, window], day 0 excluded."""
    n = int(round(window_days / interval_days))
    return interval_days * np.arange(1, n + 1)


def perturb_observations(true_rates: RateSeries, obs_times, seed,
                         noise_frac: float = NOISE_FRACTION,
                         noise_floor: float = NOISE_FLOOR,
                         noise_scale: float = 1.0) -> ObservationSet:
    """Add Gaussian noise (sd = max(noise_frac * |value|, noise_floor)) to the
    true-model rates at the observation times.

    noise_scale multiplies the drawn perturbation only, not the stored sd
    (the data covariance); 0 keeps the observations exactly clean.
    """
    clean = extract_observations(true_rates, obs_times)
    sd = np.maximum(noise_frac * np.abs(clean), noise_floor)
    rng = _rng_stream(seed)
    values = clean + noise_scale * sd * rng.standard_normal(len(clean))
    return ObservationSet(np.asarray(obs_times, dtype=np.float64),
                          rates_stream_names(true_rates), values, sd)


def rates_stream_names(rates: RateSeries) -> list:
    return rates.stream_names()


@dataclass
class RmlProblem:
    forward: object           # callable xi -> simulated observation vector
    obs: ObservationSet
    xi_star: np.ndarray

    @property
    def n_latent(self) -> int:
        return len(self.xi_star)


def rml_objective(xi, problem: RmlProblem) -> float:
    """Perturbed-data mismatch plus prior anchor (no 1/2 factors)."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != problem.xi_star.shape:
        raise ValueError("latent vector length mismatch")
    d_sim = problem.forward(xi)
    mism = np.sum(((d_sim - problem.obs.values) / problem.obs.sd) ** 2)
    return float(mism + np.sum((xi - problem.xi_star) ** 2))


@dataclass(frozen=True)
class LmSettings:
    max_iterations: int = 4
    fd_step: float = 1e-4
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 3.0
    max_rejects: int = 6
    rel_tol: float = 1e-3


@dataclass
class RmlRunResult:
    xi: np.ndarray
    history: list             # accepted objective values, strictly decreasing
    mismatch_initial: float
    mismatch_final: float
    iterations: int
    forward_calls: int
    converged: bool           # False means no descent found (degraded run)


def rml_sample(problem: RmlProblem, solver: LmSettings = LmSettings()) -> RmlRunResult:
    """Minimize the RML objective from xi = xi* by damped Gauss-Newton.

    The stacked residual is [ (d_sim - d*) / sd ; xi - xi* ]; its squared
    norm is the objective. Each accepted step strictly decreases it.
    """
    obs = problem.obs
    xi = problem.xi_star.copy()
    l = len(xi)
    calls = 0

    def residual(x):
        nonlocal calls
        calls += 1
        d_sim = problem.forward(x)
        return np.concatenate([(d_sim - obs.values) / obs.sd, x - problem.xi_star])

    r = residual(xi)
    obj = float(r @ r)
    mism0 = float(np.sum(r[:obs.n_obs] ** 2))
    history = [obj]
    lam = solver.lambda0
    converged = True
    iterations = 0
    if obj == 0.0:
        return RmlRunResult(xi, history, mism0, mism0, 0, calls, True)

    for _ in range(solver.max_iterations):
        jac = np.empty((len(r), l))
        for c in range(l):
            xp = xi.copy()
            xp[c] += solver.fd_step
            jac[:, c] = (residual(xp) - r) / solver.fd_step
        jtj = jac.T @ jac
        jtr = jac.T @ r
        accepted = False
        for _ in range(solver.max_rejects + 1):
            try:
                delta = np.linalg.solve(jtj + lam * np.eye(l), -jtr)
            except np.linalg.LinAlgError:
                lam *= solver.lambda_up
                continue
            r_try = residual(xi + delta)
            obj_try = float(r_try @ r_try)
            if obj_try < obj:
                xi = xi + delta
                r = r_try
                rel_drop = (obj - obj_try) / obj if obj > 0 else 0.0
                obj = obj_try
                history.append(obj)
                lam = max(lam / solver.lambda_down, 1e-12)
                accepted = True
                iterations += 1
                break
            lam *= solver.lambda_up
        if not accepted:
            converged = False
            break
        if rel_drop < solver.rel_tol:
            break

    return RmlRunResult(
        xi=xi, history=history, mismatch_initial=mism0,
        mismatch_final=float(np.sum(r[:obs.n_obs] ** 2)),
        iterations=iterations, forward_calls=calls, converged=converged,
    )


@dataclass
class PosteriorResult:
    models: list              # one Geomodel per run
    latents: list
    runs: list                # RmlRunResult per run

    def report(self) -> list:
        return [{
            "run": i,
            "objective_initial": run.history[0],
            "objective_final": run.history[-1],
            "mismatch_initial": run.mismatch_initial,
            "mismatch_final": run.mismatch_final,
            "iterations": run.iterations,
            "simulations": run.forward_calls,
            "converged": run.converged,
        } for i, run in enumerate(self.runs)]

    def save_report(self, path):
        with open(path, "w") as f:
            json.dump({"runs": self.report()}, f, indent=2, sort_keys=True)

    @property
    def total_simulations(self) -> int:
        return sum(run.forward_calls for run in self.runs)


def posterior_ensemble(basis: PcaBasis, forward, true_rates: RateSeries,
                       obs_times, n_r: int, seed: int,
                       solver: LmSettings = LmSettings(),
                       noise_frac: float = NOISE_FRACTION,
                       noise_floor: float = NOISE_FLOOR,
                       map_runs=None) -> PosteriorResult:
    """Draw n_r posterior geomodels, each from an independent RML run.

    Run r perturbs the observations with the RNG stream (seed, r, 0) and
    draws its prior latent from (seed, r, 1); runs are independent, so an
    order-preserving parallel map may be supplied via map_runs.
    """
    def one_run(r):
        obs = perturb_observations(true_rates, obs_times,
                                   seed_tuple(seed) + (r, 0),
                                   noise_frac, noise_floor)
        rng = _rng_stream(seed, r, 1)
        xi_star = rng.standard_normal(basis.l)
        problem = RmlProblem(forward=forward, obs=obs, xi_star=xi_star)
        return rml_sample(problem, solver)

    mapper = map_runs if map_runs is not None else lambda fn, xs: [fn(x) for x in xs]
    runs = mapper(one_run, list(range(n_r)))
    latents = [run.xi for run in runs]
    models = [pca_to_model(basis, xi) for xi in latents]
    return PosteriorResult(models=models, latents=latents, runs=runs)
