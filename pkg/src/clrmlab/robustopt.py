"""Robust production optimization: NPV economics, realization selection,
normalized constraint aggregation, and particle swarm optimization with a
filter treatment of nonlinear constraints.

The swarm minimizes J = -E[NPV] where the expectation is a trimmed mean over
the ensemble (upper and lower 10% of NPVs excluded, per particle at every
iteration). Constraint handling is lexicographic: the aggregate violation h
takes precedence over J until it reaches zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .resim import BhpSchedule, RateSeries, field_rates
from .seeds import stream as _rng_stream

DAYS_PER_YEAR = 365.0


@dataclass(frozen=True)
class EconParams:
    """Prices and costs in USD/STB; rates arrive in m3/day."""

    price_oil: float = 74.0
    cost_water_prod: float = 5.0
    cost_water_inj: float = 9.0
    discount_rate: float = 0.1  # per year
    m3_to_stb: float = 6.28981

    def __post_init__(self):
        if min(self.price_oil, self.cost_water_prod, self.cost_water_inj) < 0:
            raise ValueError("prices and costs must be nonnegative")
        if self.discount_rate < 0:
            raise ValueError("discount rate must be nonnegative")


def npv(rates: RateSeries, econ: EconParams) -> float:
    """Discounted cash flow of one rate series, in USD.

    Rates are piecewise constant over each report interval (the value at T_t
    applies on [T_t, T_{t+1})); each interval is discounted at its midpoint.
    """
    times = rates.report_times
    if len(times) < 2:
        return 0.0
    f = field_rates(rates)
    dt = np.diff(times)
    mids = times[:-1] + 0.5 * dt
    cash_per_day = econ.m3_to_stb * (
        econ.price_oil * f.prod_oil[:-1]
        - econ.cost_water_prod * f.prod_water[:-1]
        - econ.cost_water_inj * f.inj_water[:-1]
    )
    disc = (1.0 + econ.discount_rate) ** (-mids / DAYS_PER_YEAR)
    return float(np.sum(cash_per_day * dt * disc))


def select_realizations(npvs) -> np.ndarray:
    """Indices kept after trimming the top and bottom 10% by NPV.

    NPV ties are broken by realization index: the low side drops the lowest
    indices, the high side the highest. Requires 0.1 * n to be integral.
    """
    npvs = np.asarray(npvs, dtype=np.float64)
    n = len(npvs)
    if n < 10:
        raise ValueError("need at least 10 realizations to trim 10% each side")
    n_drop = round(0.1 * n)
    if abs(0.1 * n - n_drop) > 1e-9:
        raise ValueError(f"0.1 * n_r must be integral, got n_r = {n}")
    order = np.argsort(npvs, kind="stable")
    kept = order[n_drop:n - n_drop]
    return np.sort(kept)


@dataclass(frozen=True)
class ConstraintSpec:
    """Maximum-bound constraint on a rate quantity in m3/day."""

    scope: str   # "field" or a well name
    phase: str   # "water_injection" | "water_production"
    limit: float

    def __post_init__(self):
        if self.phase not in ("water_injection", "water_production"):
            raise ValueError(f"unknown constraint phase {self.phase!r}")
        if self.limit <= 0:
            raise ValueError("constraint limit must be > 0")

    def label(self) -> str:
        return f"{self.scope}:{self.phase}"


def constraint_value(rates: RateSeries, cs: ConstraintSpec) -> float:
    """Maximum of the constrained quantity over all report times."""
    if cs.phase == "water_injection":
        if cs.scope == "field":
            series = rates.inj_water.sum(axis=0)
        else:
            series = rates.inj_water[rates.inj_names.index(cs.scope)]
    else:
        if cs.scope == "field":
            series = rates.prod_water.sum(axis=0)
        else:
            series = rates.prod_water[rates.prod_names.index(cs.scope)]
    return float(series.max())


def aggregate_violation(c_matrix, limits):
    """Normalized violations for the whole swarm at one iteration.

    c_matrix[j, l] is the worst value of constraint l for particle j (already
    maximized over kept realizations and report times); limits[l] is the
    bound. Returns (cbar matrix in [0, 1], h vector, swarm maxima M).
    """
    c_matrix = np.atleast_2d(np.asarray(c_matrix, dtype=np.float64))
    limits = np.asarray(limits, dtype=np.float64)
    if c_matrix.shape[0] == 0:
        raise ValueError("empty swarm")
    m_swarm = c_matrix.max(axis=0)
    cbar = np.zeros_like(c_matrix)
    for l, (m_l, lim) in enumerate(zip(m_swarm, limits)):
        if m_l > lim:
            # the feasible-under-infeasible-swarm branch can go negative;
            # violations are clamped into [0, 1]
            cbar[:, l] = np.clip((c_matrix[:, l] - lim) / (m_l - lim), 0.0, 1.0)
    return cbar, cbar.sum(axis=1), m_swarm


def filter_compare(a, b):
    """Return the better of two (J, h) pairs: feasibility first, then J;
    exact ties keep the incumbent a."""
    (ja, ha), (jb, hb) = a, b
    return b if (hb, jb) < (ha, ja) else a


CONSTRICTION = 0.729
COGNITIVE = 1.494
SOCIAL = 1.494


def pso_step(u, v, pbest, nbest, bounds, rngs):
    """One velocity/position update for the whole swarm.

    rngs supplies one RNG stream per particle. Positions are clamped to the
    bounds and the clamped components' velocities are zeroed.
    """
    lo, hi = bounds[:, 0], bounds[:, 1]
    u_new = np.empty_like(u)
    v_new = np.empty_like(v)
    for j in range(u.shape[0]):
        r1 = rngs[j].random(u.shape[1])
        r2 = rngs[j].random(u.shape[1])
        v_j = (CONSTRICTION * v[j]
               + COGNITIVE * r1 * (pbest[j] - u[j])
               + SOCIAL * r2 * (nbest[j] - u[j]))
        u_j = u[j] + v_j
        clamped_lo = u_j < lo
        clamped_hi = u_j > hi
        u_j = np.clip(u_j, lo, hi)
        v_j[clamped_lo | clamped_hi] = 0.0
        u_new[j] = u_j
        v_new[j] = v_j
    return u_new, v_new


@dataclass(frozen=True)
class PsoSettings:
    n_particles: int = 35
    n_iterations: int = 30
    neighborhood: int = 5  # including the particle itself


@dataclass
class PsoResult:
    best_u: np.ndarray
    best_j: float
    best_h: float
    trace: list  # rows (iteration, best_j, best_h, swarm_mean_j, feasible_count)


_TAG_INIT, _TAG_VEL, _TAG_TOPO = 0, 1, 2


def _draw_neighborhoods(n_particles, size, rng):
    hoods = []
    for j in range(n_particles):
        others = [i for i in range(n_particles) if i != j]
        picks = rng.choice(len(others), size=min(size - 1, len(others)),
                           replace=False)
        hoods.append([j] + [others[p] for p in picks])
    return hoods


def pso_minimize(evaluate, bounds, limits, settings: PsoSettings,
                 seed: int) -> PsoResult:
    """Constriction-weight PSO with filter-based constraint handling.

    evaluate(positions) -> (j values, raw constraint worst-values) for the
    whole swarm; limits are the constraint bounds fed to the normalized
    aggregation. The swarm starts with one mid-bounds particle plus uniform
    random particles, zero velocities, and a random neighborhood topology
    that is redrawn whenever the swarm best fails to improve.
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    n_v = bounds.shape[0]
    n_s = settings.n_particles
    u = np.empty((n_s, n_v))
    u[0] = 0.5 * (bounds[:, 0] + bounds[:, 1])
    for j in range(1, n_s):
        rng = _rng_stream(seed, _TAG_INIT, j)
        u[j] = bounds[:, 0] + rng.random(n_v) * (bounds[:, 1] - bounds[:, 0])
    v = np.zeros_like(u)

    topo_rng = _rng_stream(seed, _TAG_TOPO)
    hoods = _draw_neighborhoods(n_s, settings.neighborhood, topo_rng)

    pbest_u = u.copy()
    pbest_jh = None
    best_u = None
    best_jh = (np.inf, np.inf)
    trace = []

    for it in range(settings.n_iterations + 1):
        j_vals, c_raw = evaluate(u)
        _, h_vals, _ = aggregate_violation(c_raw, limits)
        if pbest_jh is None:
            pbest_jh = list(zip(j_vals, h_vals))
            pbest_u = u.copy()
        else:
            for j in range(n_s):
                cand = (j_vals[j], h_vals[j])
                if filter_compare(pbest_jh[j], cand) is cand:
                    pbest_jh[j] = cand
                    pbest_u[j] = u[j]
        improved = False
        for j in range(n_s):
            cand = (pbest_jh[j][0], pbest_jh[j][1])
            if filter_compare(best_jh, cand) is cand:
                best_jh = cand
                best_u = pbest_u[j].copy()
                improved = True
        trace.append((it, best_jh[0], best_jh[1], float(np.mean(j_vals)),
                      int(np.sum(h_vals == 0.0))))
        if it == settings.n_iterations:
            break
        if not improved:
            hoods = _draw_neighborhoods(n_s, settings.neighborhood, topo_rng)
        nbest = np.empty_like(u)
        for j in range(n_s):
            incumbent = pbest_jh[j]
            inc_u = pbest_u[j]
            for member in hoods[j]:
                cand = pbest_jh[member]
                if filter_compare(incumbent, cand) is cand:
                    incumbent = cand
                    inc_u = pbest_u[member]
            nbest[j] = inc_u
        rngs = [_rng_stream(seed, _TAG_VEL, it, j) for j in range(n_s)]
        u, v = pso_step(u, v, pbest_u, nbest, bounds, rngs)

    return PsoResult(best_u, best_jh[0], best_jh[1], trace)


# ---------------------------------------------------------------------------
# reservoir-facing wrapper


@dataclass
class RobustResult:
    schedule: BhpSchedule          # full schedule including the fixed prefix
    best_j: float
    best_h: float
    trace: list
    kept: np.ndarray               # kept realization indices at the optimum
    npvs: np.ndarray               # per-realization NPVs at the optimum
    constraint_values: np.ndarray  # (n_c,) worst kept-realization values
    evaluations: int               # evaluator calls (schedules evaluated)


def robust_optimize(evaluator, econ: EconParams, constraints, bounds,
                    t_cs_days: float, n_cs: int, fixed_prefix,
                    settings: PsoSettings, seed: int) -> RobustResult:
    """Optimize the free control steps of the BHP schedule over an ensemble.

    evaluator.rates(schedule) must return one RateSeries per realization.
    fixed_prefix is an (n_wells, n_fixed) array of already-operated steps
    (empty for the first cycle); only the remaining steps are optimized.
    Realization selection runs per particle at every iteration.
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    n_wells = bounds.shape[0]
    fixed_prefix = (np.empty((n_wells, 0)) if fixed_prefix is None
                    else np.atleast_2d(np.asarray(fixed_prefix, dtype=np.float64)))
    n_fixed = fixed_prefix.shape[1]
    n_free = n_cs - n_fixed
    if n_free < 1:
        raise ValueError("no free control steps to optimize")
    limits = np.array([c.limit for c in constraints])
    var_bounds = np.repeat(bounds, n_free, axis=0)
    counter = {"evals": 0}

    def build_schedule(position):
        bhp = np.concatenate(
            [fixed_prefix, position.reshape(n_wells, n_free)], axis=1)
        return BhpSchedule(t_cs_days, bhp, bounds)

    def eval_one(position):
        schedule = build_schedule(position)
        rates_list = evaluator.rates(schedule)
        counter["evals"] += 1
        npvs = np.array([npv(r, econ) for r in rates_list])
        kept = select_realizations(npvs)
        j_val = -float(npvs[kept].mean())
        c_raw = np.array([
            max(constraint_value(rates_list[i], c) for i in kept)
            for c in constraints]) if constraints else np.zeros(0)
        return j_val, c_raw, npvs, kept

    def evaluate(positions):
        j_vals = np.empty(len(positions))
        c_raw = np.empty((len(positions), len(constraints)))
        for p, pos in enumerate(positions):
            j_vals[p], c_row, _, _ = eval_one(pos)
            c_raw[p] = c_row
        return j_vals, c_raw

    result = pso_minimize(evaluate, var_bounds, limits, settings, seed)
    best_j, best_c, best_npvs, best_kept = eval_one(result.best_u)
    return RobustResult(
        schedule=build_schedule(result.best_u),
        best_j=result.best_j,
        best_h=result.best_h,
        trace=result.trace,
        kept=best_kept,
        npvs=best_npvs,
        constraint_values=best_c,
        evaluations=counter["evals"],
    )


def save_trace_csv(path, trace):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "best_J", "best_h", "swarm_mean_J",
                    "feasible_count"])
        for row in trace:
            w.writerow([row[0], "%.12g" % row[1], "%.12g" % row[2],
                        "%.12g" % row[3], row[4]])
