"""Desk-scale incompressible oil-water finite-volume simulator.

IMPES scheme on a structured grid: the pressure equation (two-point flux
approximation, harmonic rock transmissibilities, arithmetic face total
mobility) is solved implicitly by sparse LU at fixed pressure steps; water
transport advances explicitly between solves with upstream fractional flow
and CFL-limited substeps. BHP wells use the Peaceman index with per-phase
cell mobility at producers and total cell mobility at injectors (water
injected). No capillarity, no gravity.

Units: user-facing bar / cp / md / m / day; the Darcy constant below makes
q [m3/day] = DARCY * T_geo[m] * k[md] * mobility[1/cp] * dp[bar].
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geostat import Geomodel, GridSpec

BAR_TO_PA = 1.0e5
CP_TO_PAS = 1.0e-3
MD_TO_M2 = 9.869233e-16
DAY_TO_S = 86400.0
DARCY = MD_TO_M2 * BAR_TO_PA / CP_TO_PAS * DAY_TO_S  # ~8.527e-3

REPORT_DT_DAYS = 30.0


class SimulationError(RuntimeError):
    """Pressure solve failed or saturation bounds could not be maintained."""


@dataclass(frozen=True)
class CoreyRelPerm:
    swc: float = 0.1
    sor: float = 0.1
    krw_end: float = 0.4
    kro_end: float = 0.9
    nw: float = 2.0
    no: float = 2.0

    def __post_init__(self):
        if not (0.0 <= self.swc and 0.0 <= self.sor and self.swc + self.sor < 1.0):
            raise ValueError("need 0 <= Swc, Sor and Swc + Sor < 1")
        if min(self.nw, self.no) < 1.0:
            raise ValueError("Corey exponents must be >= 1")
        if not (0.0 < self.krw_end <= 1.0 and 0.0 < self.kro_end <= 1.0):
            raise ValueError("endpoints must lie in (0, 1]")


@dataclass(frozen=True)
class FluidSpec:
    mu_o: float = 2.0      # cp
    mu_w: float = 1.0      # cp
    porosity: float = 0.2
    relperm: CoreyRelPerm = field(default_factory=CoreyRelPerm)
    sw_init: float = 0.1
    p_init: float = 400.0  # bar; unused by the incompressible solver

    def __post_init__(self):
        if min(self.mu_o, self.mu_w) <= 0:
            raise ValueError("viscosities must be > 0")
        if not (0.0 < self.porosity < 1.0):
            raise ValueError("porosity must lie in (0, 1)")
        rp = self.relperm
        if not (rp.swc <= self.sw_init <= 1.0 - rp.sor):
            raise ValueError("Sw_init must lie in [Swc, 1 - Sor]")


@dataclass(frozen=True)
class WellSpec:
    name: str
    kind: str  # "injector" | "producer"
    i: int
    j: int
    layers: tuple  # inclusive (k_lo, k_hi)
    r_w: float = 0.1

    def __post_init__(self):
        if self.kind not in ("injector", "producer"):
            raise ValueError(f"unknown well kind {self.kind!r}")
        if self.layers[0] > self.layers[1]:
            raise ValueError("layers must be (k_lo, k_hi) with k_lo <= k_hi")

    def cells(self, grid: GridSpec) -> np.ndarray:
        if not (0 <= self.i < grid.nx and 0 <= self.j < grid.ny):
            raise ValueError(f"well {self.name} outside grid")
        if not (0 <= self.layers[0] and self.layers[1] < grid.nz):
            raise ValueError(f"well {self.name} perforations outside grid")
        ks = np.arange(self.layers[0], self.layers[1] + 1)
        return grid.cell_index(self.i, self.j, ks)


def fully_penetrating(name: str, kind: str, i: int, j: int, grid: GridSpec,
                      r_w: float = 0.1) -> WellSpec:
    return WellSpec(name, kind, i, j, (0, grid.nz - 1), r_w)


@dataclass
class BhpSchedule:
    """Per-well BHPs held constant over n_cs control steps of t_cs days."""

    t_cs_days: float
    bhp: np.ndarray     # (n_wells, n_cs), bar
    bounds: np.ndarray  # (n_wells, 2), bar

    def __post_init__(self):
        self.bhp = np.asarray(self.bhp, dtype=np.float64)
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.bhp.ndim != 2 or self.bounds.shape != (self.bhp.shape[0], 2):
            raise ValueError("bhp must be (n_wells, n_cs) and bounds (n_wells, 2)")
        lo, hi = self.bounds[:, :1], self.bounds[:, 1:]
        if np.any(self.bhp < lo - 1e-9) or np.any(self.bhp > hi + 1e-9):
            raise ValueError("BHP values outside bounds")

    @property
    def n_wells(self) -> int:
        return self.bhp.shape[0]

    @property
    def n_cs(self) -> int:
        return self.bhp.shape[1]

    @property
    def horizon_days(self) -> float:
        return self.n_cs * self.t_cs_days

    def step_of(self, t_days: float) -> int:
        """Control step containing time t; the final boundary maps to the
        last step."""
        return min(int(t_days // self.t_cs_days), self.n_cs - 1)

    def values_at(self, t_days: float) -> np.ndarray:
        return self.bhp[:, self.step_of(t_days)]

    def save_csv(self, path, well_names):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["well", "control_step", "bhp_bar"])
            for wi, name in enumerate(well_names):
                for s in range(self.n_cs):
                    w.writerow([name, s + 1, "%.12g" % self.bhp[wi, s]])


def load_schedule_csv(path, well_names, t_cs_days, bounds) -> BhpSchedule:
    """Read the (well, control_step, bhp_bar) CSV back into a schedule;
    step duration and bounds are not stored in the file."""
    per_well = {n: {} for n in well_names}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for name, step, bhp in reader:
            per_well[name][int(step)] = float(bhp)
    n_cs = max(len(v) for v in per_well.values())
    mat = np.array([[per_well[n][s + 1] for s in range(n_cs)] for n in well_names])
    return BhpSchedule(t_cs_days, mat, np.asarray(bounds, dtype=np.float64))


@dataclass
class RateSeries:
    """Nonnegative per-well rates (m3/day) at 30-day report times."""

    report_times: np.ndarray  # (N_t,), days
    inj_names: list
    prod_names: list
    inj_water: np.ndarray     # (n_I, N_t)
    prod_oil: np.ndarray      # (n_P, N_t)
    prod_water: np.ndarray    # (n_P, N_t)

    def __post_init__(self):
        n_t = len(self.report_times)
        for arr, n in ((self.inj_water, len(self.inj_names)),
                       (self.prod_oil, len(self.prod_names)),
                       (self.prod_water, len(self.prod_names))):
            if arr.shape != (n, n_t):
                raise ValueError("rate array shape inconsistent with names/times")
        if min(self.inj_water.min(initial=0.0), self.prod_oil.min(initial=0.0),
               self.prod_water.min(initial=0.0)) < 0:
            raise ValueError("rates must be nonnegative")

    @property
    def n_t(self) -> int:
        return len(self.report_times)

    def stream_names(self):
        return ([f"{n}:water_inj" for n in self.inj_names]
                + [f"{n}:oil_prod" for n in self.prod_names]
                + [f"{n}:water_prod" for n in self.prod_names])

    def streams(self) -> np.ndarray:
        """(n_I + 2 n_P, N_t) matrix: injector water, producer oil, producer
        water blocks in declaration order."""
        return np.vstack([self.inj_water, self.prod_oil, self.prod_water])

    @staticmethod
    def from_streams(times, inj_names, prod_names, mat) -> "RateSeries":
        n_i, n_p = len(inj_names), len(prod_names)
        return RateSeries(np.asarray(times, dtype=np.float64), list(inj_names),
                          list(prod_names), mat[:n_i], mat[n_i:n_i + n_p],
                          mat[n_i + n_p:])

    def save_csv(self, path):
        mat = self.streams()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time_days"] + self.stream_names())
            for t in range(self.n_t):
                w.writerow(["%.12g" % self.report_times[t]]
                           + ["%.12g" % v for v in mat[:, t]])

    @staticmethod
    def load_csv(path) -> "RateSeries":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header = rows[0][1:]
        inj_names = [h.split(":")[0] for h in header if h.endswith(":water_inj")]
        prod_names = [h.split(":")[0] for h in header if h.endswith(":oil_prod")]
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        return RateSeries.from_streams(data[:, 0], inj_names, prod_names, data[:, 1:].T)


@dataclass(frozen=True)
class SolverSettings:
    pressure_dt_days: float = 15.0
    cfl: float = 0.5
    sat_tol: float = 1e-7
    max_halvings: int = 12
    cg_rtol: float = 1e-12
    cg_maxiter: int = 40000


def _cg_jacobi(a_mat, rhs, x0, rtol, maxiter):
    """Jacobi-preconditioned conjugate gradients; returns (x, converged)."""
    inv_d = 1.0 / a_mat.diagonal()
    x = x0.copy()
    r = rhs - a_mat @ x
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    target = rtol * np.linalg.norm(rhs)
    for _ in range(maxiter):
        if np.linalg.norm(r) <= target:
            return x, True
        ap = a_mat @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, np.linalg.norm(r) <= target


def relperm(sw, rp: CoreyRelPerm):
    """Corey relative permeabilities; sw may be scalar or array in [0, 1]."""
    s = np.clip((np.asarray(sw, dtype=np.float64) - rp.swc)
                / (1.0 - rp.swc - rp.sor), 0.0, 1.0)
    return rp.krw_end * s**rp.nw, rp.kro_end * (1.0 - s) ** rp.no


def well_index(grid: GridSpec, k_md, r_w: float):
    """Peaceman completion index in md*m for a vertical well in one cell."""
    r_eq = 0.14 * math.sqrt(grid.dx**2 + grid.dy**2)
    if r_eq <= r_w:
        raise ValueError(f"equivalent radius {r_eq:.3g} <= wellbore radius {r_w:.3g}")
    return 2.0 * math.pi * np.asarray(k_md) * grid.dz / math.log(r_eq / r_w)


def _max_fractional_flow_slope(fluid: FluidSpec) -> float:
    sw = np.linspace(fluid.relperm.swc, 1.0 - fluid.relperm.sor, 4001)
    krw, kro = relperm(sw, fluid.relperm)
    fw = (krw / fluid.mu_w) / (krw / fluid.mu_w + kro / fluid.mu_o)
    return max(float(np.abs(np.gradient(fw, sw)).max()), 1.0)


class _Faces:
    """Static face connectivity and rock transmissibilities (md*m)."""

    def __init__(self, grid: GridSpec, perm_md: np.ndarray):
        k = perm_md.reshape((grid.nx, grid.ny, grid.nz), order="F")
        idx = np.arange(grid.n_cells).reshape((grid.nx, grid.ny, grid.nz), order="F")
        pairs_a, pairs_b, trans = [], [], []
        geo = {
            0: grid.dy * grid.dz / grid.dx,
            1: grid.dx * grid.dz / grid.dy,
            2: grid.dx * grid.dy / grid.dz,
        }
        for axis in range(3):
            n_ax = (grid.nx, grid.ny, grid.nz)[axis]
            if n_ax < 2:
                continue
            sl_a = [slice(None)] * 3
            sl_b = [slice(None)] * 3
            sl_a[axis] = slice(0, n_ax - 1)
            sl_b[axis] = slice(1, n_ax)
            ka, kb = k[tuple(sl_a)], k[tuple(sl_b)]
            pairs_a.append(idx[tuple(sl_a)].ravel(order="F"))
            pairs_b.append(idx[tuple(sl_b)].ravel(order="F"))
            trans.append((geo[axis] * 2.0 * ka * kb / (ka + kb)).ravel(order="F"))
        self.a = np.concatenate(pairs_a) if pairs_a else np.empty(0, dtype=np.int64)
        self.b = np.concatenate(pairs_b) if pairs_b else np.empty(0, dtype=np.int64)
        self.t_rock = np.concatenate(trans) if trans else np.empty(0)


def simulate(
    model: Geomodel,
    fluid: FluidSpec,
    wells: list[WellSpec],
    schedule: BhpSchedule,
    numerics: SolverSettings = SolverSettings(),
) -> RateSeries:
    """Run the waterflood and report per-well rates every 30 days.

    The day-0 row comes from the initial pressure solve under the first
    control step. Raises SimulationError on linear-solve failure or if
    saturation bounds cannot be maintained by substep halving.
    """
    return simulate_detailed(model, fluid, wells, schedule, numerics)[0]


def simulate_detailed(
    model: Geomodel,
    fluid: FluidSpec,
    wells: list[WellSpec],
    schedule: BhpSchedule,
    numerics: SolverSettings = SolverSettings(),
):
    """As simulate(), additionally returning the final water saturation and
    pressure fields (flat, x-fastest)."""
    grid = model.grid
    if len(wells) != schedule.n_wells:
        raise ValueError("schedule rows must match the well list")
    if not wells:
        raise ValueError("at least one well is required")
    horizon = schedule.horizon_days
    if horizon % REPORT_DT_DAYS != 0:
        raise ValueError("schedule horizon must be a multiple of 30 days")

    perm = model.perm_md()
    faces = _Faces(grid, perm)
    pore_vol = fluid.porosity * grid.dx * grid.dy * grid.dz
    n = grid.n_cells

    inj = [w for w in wells if w.kind == "injector"]
    prod = [w for w in wells if w.kind == "producer"]
    well_cells = [w.cells(grid) for w in wells]
    well_wi = [well_index(grid, perm[c], w.r_w) for w, c in zip(wells, well_cells)]

    max_slope = _max_fractional_flow_slope(fluid)
    sw_lo = min(fluid.relperm.swc, fluid.sw_init)
    sw_hi = max(1.0 - fluid.relperm.sor, fluid.sw_init)

    sw = np.full(n, fluid.sw_init)
    report_times = np.arange(0.0, horizon + 0.5 * REPORT_DT_DAYS, REPORT_DT_DAYS)
    n_t = len(report_times)
    inj_rates = np.zeros((len(inj), n_t))
    oil_rates = np.zeros((len(prod), n_t))
    wat_rates = np.zeros((len(prod), n_t))

    p_guess = np.full(n, float(np.mean(schedule.values_at(0.0))))

    def solve_pressure(t_days):
        bhp = schedule.values_at(t_days)
        krw, kro = relperm(sw, fluid.relperm)
        mob_w = krw / fluid.mu_w
        mob_o = kro / fluid.mu_o
        mob_t = mob_w + mob_o
        t_face = DARCY * faces.t_rock * 0.5 * (mob_t[faces.a] + mob_t[faces.b])
        rows = np.concatenate([faces.a, faces.b, faces.a, faces.b])
        cols = np.concatenate([faces.b, faces.a, faces.a, faces.b])
        vals = np.concatenate([-t_face, -t_face, t_face, t_face])
        diag = np.zeros(n)
        rhs = np.zeros(n)
        for wi_idx, (w, cells) in enumerate(zip(wells, well_cells)):
            conn = DARCY * well_wi[wi_idx] * mob_t[cells]
            diag[cells] += conn
            rhs[cells] += conn * bhp[wi_idx]
        if not diag.any():
            raise SimulationError("pressure system is singular (no well connections)")
        rows = np.concatenate([rows, np.arange(n)])
        cols = np.concatenate([cols, np.arange(n)])
        vals = np.concatenate([vals, diag])
        a_mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        p, converged = _cg_jacobi(a_mat, rhs, p_guess, numerics.cg_rtol,
                                  numerics.cg_maxiter)
        if not converged:
            try:
                p = spla.splu(a_mat.tocsc()).solve(rhs)
            except RuntimeError as exc:
                raise SimulationError(f"pressure linear solve failed: {exc}") from exc
        if not np.all(np.isfinite(p)):
            raise SimulationError("pressure linear solve returned non-finite values")
        p_guess[:] = p
        flux = t_face * (p[faces.a] - p[faces.b])
        # signed per-well totals (positive in the well's nominal direction)
        q_tot = []
        for wi_idx, (w, cells) in enumerate(zip(wells, well_cells)):
            conn = DARCY * well_wi[wi_idx] * mob_t[cells]
            dp = p[cells] - bhp[wi_idx]
            q_tot.append(-conn * dp if w.kind == "injector" else conn * dp)
        return p, flux, q_tot, mob_w, mob_t

    def record(col, p, q_tot, mob_w, mob_t):
        ii = pp = 0
        for w, cells, q in zip(wells, well_cells, q_tot):
            if w.kind == "injector":
                inj_rates[ii, col] = max(q.sum(), 0.0)
                ii += 1
            else:
                frac = np.divide(mob_w[cells], mob_t[cells],
                                 out=np.zeros_like(q), where=mob_t[cells] > 0)
                wat_rates[pp, col] = max((frac * q).sum(), 0.0)
                oil_rates[pp, col] = max(((1.0 - frac) * q).sum(), 0.0)
                pp += 1

    def advance(seg_days, flux, q_tot, sw_in):
        """Explicit upstream water transport over one pressure segment."""
        influx = np.zeros(n)
        outflux = np.zeros(n)
        pos = flux > 0
        outflux += np.bincount(faces.a[pos], flux[pos], minlength=n)
        outflux += np.bincount(faces.b[~pos], -flux[~pos], minlength=n)
        q_inj_cell = np.zeros(n)
        q_prod_cell = np.zeros(n)
        for w, cells, q in zip(wells, well_cells, q_tot):
            if w.kind == "injector":
                q_inj_cell[cells] += q
            else:
                q_prod_cell[cells] += q
        outflux += np.maximum(q_prod_cell, 0.0)
        with np.errstate(divide="ignore"):
            dt_lim = numerics.cfl * pore_vol / (outflux * max_slope)
        dt_lim = float(np.min(dt_lim[outflux > 0], initial=seg_days))
        n_sub = max(1, int(math.ceil(seg_days / max(dt_lim, 1e-12))))

        for _ in range(numerics.max_halvings + 1):
            s = sw_in.copy()
            dt = seg_days / n_sub
            ok = True
            for _ in range(n_sub):
                krw, kro = relperm(s, fluid.relperm)
                fw = krw / fluid.mu_w / (krw / fluid.mu_w + kro / fluid.mu_o)
                fw_face = np.where(pos, fw[faces.a], fw[faces.b])
                fwat = fw_face * flux
                net = (np.bincount(faces.b, fwat, minlength=n)
                       - np.bincount(faces.a, fwat, minlength=n)
                       + q_inj_cell - fw * q_prod_cell)
                s = s + dt * net / pore_vol
                if s.min() < sw_lo - numerics.sat_tol or s.max() > sw_hi + numerics.sat_tol:
                    ok = False
                    break
                np.clip(s, sw_lo, sw_hi, out=s)
            if ok:
                return s
            n_sub *= 2
        raise SimulationError(
            f"saturation out of bounds after {numerics.max_halvings} substep halvings"
        )

    t = 0.0
    p, flux, q_tot, mob_w, mob_t = solve_pressure(t)
    record(0, p, q_tot, mob_w, mob_t)
    col = 1
    while t < horizon - 1e-9:
        next_report = report_times[col] if col < n_t else horizon
        next_control = (schedule.step_of(t) + 1) * schedule.t_cs_days
        t_end = min(t + numerics.pressure_dt_days, next_report, next_control, horizon)
        sw = advance(t_end - t, flux, q_tot, sw)
        t = t_end
        p, flux, q_tot, mob_w, mob_t = solve_pressure(t)
        if abs(t - next_report) < 1e-9:
            record(col, p, q_tot, mob_w, mob_t)
            col += 1

    rates = RateSeries(report_times, [w.name for w in inj], [w.name for w in prod],
                       inj_rates, oil_rates, wat_rates)
    return rates, sw, p


@dataclass(frozen=True)
class FieldRates:
    inj_water: np.ndarray
    prod_water: np.ndarray
    prod_oil: np.ndarray


def field_rates(r: RateSeries) -> FieldRates:
    """Field-wide injection, water production and oil production per report time."""
    return FieldRates(r.inj_water.sum(axis=0), r.prod_water.sum(axis=0),
                      r.prod_oil.sum(axis=0))
