"""Conditioned multi-Gaussian log-permeability fields and their PCA parameterization.

Realizations are drawn by Cholesky factorization of the full spherical-variogram
covariance matrix (exact at desk scale), conditioned to hard data by simple
kriging followed by substitution at the data cells. The PCA basis is built from
a centered ensemble matrix scaled by 1/sqrt(n-1), truncated at a configured
energy fraction of the squared singular values.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

from .seeds import stream as _rng_stream


class CovarianceFactorizationError(RuntimeError):
    """Covariance matrix could not be Cholesky-factorized (near-singular);
    caller should increase the nugget."""


class RankDeficiencyError(RuntimeError):
    """Ensemble rank too low to reach the requested energy target."""

    def __init__(self, target: float, achieved: float):
        super().__init__(
            f"energy target {target:.4f} unreachable; achieved {achieved:.6f}"
        )
        self.target = target
        self.achieved = achieved


@dataclass(frozen=True)
class GridSpec:
    """Structured grid: cell counts and sizes (m). Cells are indexed x-fastest."""

    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("cell counts must be >= 1")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("cell sizes must be > 0")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    def cell_index(self, i, j, k):
        """Flat index of cell (i, j, k), x-fastest ordering."""
        return i + self.nx * (j + self.ny * k)

    def cell_ijk(self, cell):
        cell = np.asarray(cell)
        i = cell % self.nx
        j = (cell // self.nx) % self.ny
        k = cell // (self.nx * self.ny)
        return i, j, k

    def cell_centers(self) -> np.ndarray:
        """(n_cells, 3) array of cell-center coordinates in meters."""
        i, j, k = self.cell_ijk(np.arange(self.n_cells))
        return np.column_stack(
            [(i + 0.5) * self.dx, (j + 0.5) * self.dy, (k + 0.5) * self.dz]
        )


@dataclass(frozen=True)
class VariogramSpec:
    """Spherical variogram with geometric anisotropy.

    ``azimuth_deg`` rotates the r_max axis about the vertical, measured from
    the +y axis toward +x. r_min is aligned with the vertical (z) axis.
    """

    sill: float
    r_max: float
    r_mid: float
    r_min: float
    azimuth_deg: float = 0.0
    mean: float = 0.0

    def __post_init__(self):
        if self.sill <= 0:
            raise ValueError("sill must be > 0")
        if not (self.r_max >= self.r_mid >= self.r_min > 0):
            raise ValueError("ranges must satisfy r_max >= r_mid >= r_min > 0")


@dataclass(frozen=True)
class HardData:
    """Exactly-known log-permeability values at given flat cell indices."""

    cells: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cells", np.asarray(self.cells, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.cells.shape != self.values.shape or self.cells.ndim != 1:
            raise ValueError("cells and values must be 1-D arrays of equal length")
        if len(np.unique(self.cells)) != len(self.cells):
            raise ValueError("hard-data cell indices must be unique")

    @staticmethod
    def empty() -> "HardData":
        return HardData(np.empty(0, dtype=np.int64), np.empty(0))

    def __len__(self):
        return len(self.cells)


@dataclass(frozen=True)
class Geomodel:
    """Per-cell natural-log permeability (k in md) on a structured grid."""

    grid: GridSpec
    logk: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logk", np.asarray(self.logk, dtype=np.float64))
        if self.logk.shape != (self.grid.n_cells,):
            raise ValueError(
                f"logk length {self.logk.shape} != grid cells {self.grid.n_cells}"
            )
        if not np.all(np.isfinite(self.logk)):
            raise ValueError("logk must be finite at every cell")

    def perm_md(self) -> np.ndarray:
        return np.exp(self.logk)

    def cube(self) -> np.ndarray:
        """logk reshaped to (nx, ny, nz)."""
        g = self.grid
        return self.logk.reshape((g.nx, g.ny, g.nz), order="F")


@dataclass(frozen=True)
class PcaBasis:
    """Truncated PCA of a geomodel ensemble: m = basis @ (singulars * xi) + mean."""

    grid: GridSpec
    mean: np.ndarray
    basis: np.ndarray       # (n_cells, l), orthonormal columns
    singulars: np.ndarray   # (l,), positive, decreasing
    energy_fraction: float
    energy_target: float

    @property
    def l(self) -> int:
        return self.basis.shape[1]

    def validate(self, tol: float = 1e-8):
        gram = self.basis.T @ self.basis
        err = np.max(np.abs(gram - np.eye(self.l)))
        if err > tol:
            raise ValueError(f"basis columns not orthonormal (max dev {err:.2e})")
        if np.any(self.singulars <= 0) or np.any(np.diff(self.singulars) >= 0):
            raise ValueError("singular values must be positive and strictly decreasing")
        if self.energy_fraction < self.energy_target - 1e-12:
            raise ValueError("retained energy below target")


def spherical_covariance(lag, v: VariogramSpec):
    """Covariance of the anisotropic spherical model at the given lag vector(s).

    Parameters
    ----------
    lag : array_like, shape (3,) or (n, 3)
        Separation vector(s) in meters.
    v : VariogramSpec

    Returns
    -------
    float or ndarray
        sill * (1 - sph(h)) with h the anisotropy-normalized lag length.
    """
    lag = np.asarray(lag, dtype=np.float64)
    single = lag.ndim == 1
    lag = np.atleast_2d(lag)
    theta = math.radians(v.azimuth_deg)
    u_max = lag[:, 0] * math.sin(theta) + lag[:, 1] * math.cos(theta)
    u_mid = lag[:, 0] * math.cos(theta) - lag[:, 1] * math.sin(theta)
    u_vrt = lag[:, 2]
    h = np.sqrt((u_max / v.r_max) ** 2 + (u_mid / v.r_mid) ** 2 + (u_vrt / v.r_min) ** 2)
    cov = v.sill * (1.0 - _sph(h))
    return float(cov[0]) if single else cov


def _sph(h):
    """Spherical variogram function: 1.5h - 0.5h^3 for h < 1, else 1."""
    h = np.minimum(h, 1.0)
    return 1.5 * h - 0.5 * h**3


def covariance_matrix(grid: GridSpec, v: VariogramSpec, cells=None) -> np.ndarray:
    """Dense covariance matrix over all grid cells (or a subset of flat indices).

    Equivalent to evaluating spherical_covariance at every pairwise lag, but
    built axis-wise in the rotated/scaled frame to avoid an (n, n, 3) array.
    """
    pts = grid.cell_centers()
    if cells is not None:
        pts = pts[np.asarray(cells)]
    theta = math.radians(v.azimuth_deg)
    q = np.column_stack([
        (pts[:, 0] * math.sin(theta) + pts[:, 1] * math.cos(theta)) / v.r_max,
        (pts[:, 0] * math.cos(theta) - pts[:, 1] * math.sin(theta)) / v.r_mid,
        pts[:, 2] / v.r_min,
    ])
    h2 = np.zeros((len(pts), len(pts)))
    for ax in range(3):
        d = q[:, ax, None] - q[None, :, ax]
        h2 += d * d
    return v.sill * (1.0 - _sph(np.sqrt(h2)))


NUGGET_FRACTION = 1e-8  # of the sill, added to the diagonal before factorization


def sample_realizations(
    grid: GridSpec,
    v: VariogramSpec,
    hd: HardData,
    count: int,
    seed: int,
) -> list[Geomodel]:
    """Draw conditioned realizations of the log-permeability field.

    Unconditional fields are mean + L z with L the Cholesky factor of the
    covariance (nugget-stabilized); conditioning applies the simple-kriging
    update for the hard-data residuals and then substitutes the exact values
    at the data cells. Realization r uses the RNG stream seeded by (seed, r),
    so results are independent of any parallel execution order.
    """
    n = grid.n_cells
    cov = covariance_matrix(grid, v)
    cov[np.diag_indices(n)] += NUGGET_FRACTION * v.sill
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceFactorizationError(
            f"covariance factorization failed for {n} cells: {exc}"
        ) from exc

    if len(hd):
        if hd.cells.min() < 0 or hd.cells.max() >= n:
            raise ValueError("hard-data cell index outside grid")
        k_dd = cov[np.ix_(hd.cells, hd.cells)]
        # columns of kriging weights: solve K_dd W^T = C_d,all
        weights = np.linalg.solve(k_dd, cov[hd.cells, :]).T  # (n, n_hd)

    out = []
    for r in range(count):
        rng = _rng_stream(seed, r)
        m = v.mean + chol @ rng.standard_normal(n)
        if len(hd):
            m = m + weights @ (hd.values - m[hd.cells])
            m[hd.cells] = hd.values
        out.append(Geomodel(grid, m))
    return out


def build_pca(models: list[Geomodel], energy_target: float) -> PcaBasis:
    """Build the truncated PCA basis from an ensemble of geomodels.

    The centered data matrix carries the 1/sqrt(n-1) factor, so squared
    singular values are energies. The retained dimension is the smallest l
    whose cumulative energy fraction reaches ``energy_target``.
    """
    if len(models) < 2:
        raise ValueError("need at least 2 models to build a PCA basis")
    grid = models[0].grid
    if any(m.grid != grid for m in models):
        raise ValueError("all models must share one grid")
    n_rp = len(models)
    data = np.column_stack([m.logk for m in models])
    mean = data.mean(axis=1)
    y = (data - mean[:, None]) / math.sqrt(n_rp - 1)
    u, s, _ = np.linalg.svd(y, full_matrices=False)
    # strip numerically-zero modes (centered matrix has rank <= n_rp - 1)
    rank = int(np.sum(s > s[0] * 1e-12)) if s[0] > 0 else 0
    rank = min(rank, n_rp - 1)
    if rank == 0:
        raise RankDeficiencyError(energy_target, 0.0)
    u, s = u[:, :rank], s[:rank]
    cum = np.cumsum(s**2)
    frac = cum / cum[-1]
    if frac[-1] + 1e-12 < energy_target:
        raise RankDeficiencyError(energy_target, float(frac[-1]))
    l = int(np.searchsorted(frac, energy_target - 1e-12) + 1)
    basis = PcaBasis(
        grid=grid,
        mean=mean,
        basis=u[:, :l],
        singulars=s[:l],
        energy_fraction=float(frac[l - 1]),
        energy_target=energy_target,
    )
    basis.validate()
    return basis


def pca_to_model(basis: PcaBasis, xi) -> Geomodel:
    """Map a latent vector to a geomodel: m = U_l S_l xi + mean."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (basis.l,):
        raise ValueError(f"xi length {xi.shape} != retained dimension {basis.l}")
    return Geomodel(basis.grid, basis.basis @ (basis.singulars * xi) + basis.mean)


def project(basis: PcaBasis, model: Geomodel) -> np.ndarray:
    """Latent coordinates of a geomodel: xi = S_l^-1 U_l^T (m - mean)."""
    return (basis.basis.T @ (model.logk - basis.mean)) / basis.singulars


# ---------------------------------------------------------------------------
# persistence

_HEADER = struct.Struct("<iiiddd")
_PCA_MAGIC = b"CLRMPCA1"


def save_pca(path, basis: PcaBasis):
    """Deterministic binary PCA file: grid header, dimensions, then the
    mean, singular values and basis columns as little-endian float64."""
    g = basis.grid
    with open(path, "wb") as f:
        f.write(_PCA_MAGIC)
        f.write(_HEADER.pack(g.nx, g.ny, g.nz, g.dx, g.dy, g.dz))
        f.write(struct.pack("<idd", basis.l, basis.energy_fraction,
                            basis.energy_target))
        f.write(basis.mean.astype("<f8").tobytes())
        f.write(basis.singulars.astype("<f8").tobytes())
        f.write(basis.basis.astype("<f8").tobytes(order="C"))


def load_pca(path) -> PcaBasis:
    with open(path, "rb") as f:
        if f.read(len(_PCA_MAGIC)) != _PCA_MAGIC:
            raise ValueError(f"{path} is not a PCA basis file")
        nx, ny, nz, dx, dy, dz = _HEADER.unpack(f.read(_HEADER.size))
        grid = GridSpec(nx, ny, nz, dx, dy, dz)
        l, energy_fraction, energy_target = struct.unpack("<idd", f.read(20))
        n = grid.n_cells
        mean = np.frombuffer(f.read(8 * n), dtype="<f8").copy()
        singulars = np.frombuffer(f.read(8 * l), dtype="<f8").copy()
        basis = np.frombuffer(f.read(8 * n * l), dtype="<f8").reshape(n, l).copy()
    return PcaBasis(grid, mean, basis, singulars, energy_fraction, energy_target)


def save_geomodel(path, gm: Geomodel):
    """Binary geomodel file: little-endian (nx, ny, nz) int32, (dx, dy, dz)
    float64, then n_cells float64 logk values in x-fastest order."""
    g = gm.grid
    with open(path, "wb") as f:
        f.write(_HEADER.pack(g.nx, g.ny, g.nz, g.dx, g.dy, g.dz))
        f.write(gm.logk.astype("<f8").tobytes())


def load_geomodel(path) -> Geomodel:
    with open(path, "rb") as f:
        nx, ny, nz, dx, dy, dz = _HEADER.unpack(f.read(_HEADER.size))
        grid = GridSpec(nx, ny, nz, dx, dy, dz)
        logk = np.frombuffer(f.read(8 * grid.n_cells), dtype="<f8").copy()
    return Geomodel(grid, logk)


def export_geomodel_csv(path, gm: Geomodel):
    """CSV export: cell, i, j, k, logk."""
    i, j, k = gm.grid.cell_ijk(np.arange(gm.grid.n_cells))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "i", "j", "k", "logk"])
        for c in range(gm.grid.n_cells):
            w.writerow([c, i[c], j[c], k[c], "%.12g" % gm.logk[c]])
