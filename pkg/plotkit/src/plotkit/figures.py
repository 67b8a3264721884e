"""Render the standard figure families from run-directory CSV files.

Every renderer is a pure function of its input files: fixed style, no
timestamps, deterministic output bytes for identical inputs. Inputs are the
delimited files the reservoir-management CLI writes; nothing here imports
the simulator or proxy code.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .stats import box_stats  # noqa: E402

SIM_COLOR = "tab:red"
PROXY_COLOR = "tab:blue"
PROXY_BOX_COLOR = "tab:green"
SIM_BOX_COLOR = "gold"
TRUTH_COLOR = "red"
SAVEFIG = {"dpi": 130, "metadata": {"Software": None}}


@dataclass
class PlotSpec:
    kind: str
    in_dir: Path
    out_path: Path
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.in_dir = Path(self.in_dir)
        self.out_path = Path(self.out_path)
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; "
                             f"choose from {sorted(KINDS)}")


class MissingColumnError(KeyError):
    pass


def _read_csv(path) -> tuple[list, list]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


def _columns(path, names) -> list:
    header, rows = _read_csv(path)
    try:
        idx = [header.index(n) for n in names]
    except ValueError as exc:
        raise MissingColumnError(f"{path}: expected columns {names}, "
                                 f"found {header}") from exc
    return [[row[i] for i in idx] for row in rows]


def _read_rates(path):
    """Rate CSV: header time_days,<well>:<phase>,...; returns (times, header
    stream names, matrix (n_streams, n_t))."""
    header, rows = _read_csv(path)
    if header[0] != "time_days":
        raise MissingColumnError(f"{path}: first column must be time_days")
    data = np.array([[float(v) for v in row] for row in rows])
    return data[:, 0], header[1:], data[:, 1:].T


def render(spec: PlotSpec) -> Path:
    """Render one figure; returns the output path."""
    fig = KINDS[spec.kind](spec)
    spec.out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.out_path, **SAVEFIG)
    plt.close(fig)
    return spec.out_path


# ---------------------------------------------------------------------------
# figure builders (each returns a matplotlib Figure)


def rates_figure(spec: PlotSpec):
    """Per-well rate overlays: simulator (red line) vs proxy (blue circles)."""
    sim_name = spec.options.get("sim", "rates_sim_median.csv")
    prox_name = spec.options.get("proxy", "rates_proxy_median.csv")
    t_sim, streams, sim = _read_rates(spec.in_dir / sim_name)
    t_prox, streams_p, prox = _read_rates(spec.in_dir / prox_name)
    if streams != streams_p:
        raise ValueError("simulator and proxy rate files list different streams")
    n = len(streams)
    ncols = 3 if n > 4 else 2
    nrows = -(-n // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(4.2 * ncols, 3.0 * nrows),
                             squeeze=False)
    for k, name in enumerate(streams):
        ax = axes[k // ncols][k % ncols]
        ax.plot(t_sim, sim[k], color=SIM_COLOR, lw=1.6, label="simulation")
        ax.plot(t_prox, prox[k], color=PROXY_COLOR, lw=1.0, marker="o",
                ms=3.5, fillstyle="none", label="proxy")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("time (days)", fontsize=8)
        ax.set_ylabel("rate (m$^3$/day)", fontsize=8)
        ax.tick_params(labelsize=7)
    for k in range(n, nrows * ncols):
        axes[k // ncols][k % ncols].set_axis_off()
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    return fig


def error_rank_figure(spec: PlotSpec):
    """Per-sample proxy errors sorted in increasing order."""
    rows = _columns(spec.in_dir / spec.options.get("errors", "error_rank.csv"),
                    ["rank", "error"])
    if not rows:
        raise ValueError("error_rank.csv has no rows")
    rank = [int(r[0]) for r in rows]
    err = [float(r[1]) for r in rows]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(rank, err, color=PROXY_COLOR, marker="o", ms=3)
    for q in (10, 50, 90):
        ax.axhline(np.percentile(err, q, method="linear"), color="gray",
                   lw=0.7, ls=":")
    ax.set_xlabel("test case (sorted)")
    ax.set_ylabel("overall error")
    ax.set_title("proxy error by rank")
    fig.tight_layout()
    return fig


def crossplot_figure(spec: PlotSpec):
    """Proxy-vs-simulator scatter per quantity with a 45-degree reference."""
    rows = _columns(spec.in_dir / spec.options.get("data", "crossplot.csv"),
                    ["quantity", "simulator", "proxy"])
    if not rows:
        raise ValueError("crossplot.csv has no rows")
    by_quantity: dict = {}
    for q, s, p in rows:
        by_quantity.setdefault(q, []).append((float(s), float(p)))
    names = sorted(by_quantity)
    ncols = min(3, len(names))
    nrows = -(-len(names) // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.8 * ncols, 3.4 * nrows),
                             squeeze=False)
    for k, name in enumerate(names):
        ax = axes[k // ncols][k % ncols]
        pts = np.array(by_quantity[name])
        lo = min(pts.min(), 0.0)
        hi = pts.max() * 1.05 if pts.max() > 0 else 1.0
        ax.plot([lo, hi], [lo, hi], color="gray", lw=0.8, ls="--")
        ax.scatter(pts[:, 0], pts[:, 1], s=12, color=PROXY_COLOR, alpha=0.8)
        ax.set_title(name, fontsize=8)
        ax.set_xlabel("simulation", fontsize=8)
        ax.set_ylabel("proxy", fontsize=8)
        ax.tick_params(labelsize=7)
    for k in range(len(names), nrows * ncols):
        axes[k // ncols][k % ncols].set_axis_off()
    fig.tight_layout()
    return fig


def _cycle_dirs(run_dir: Path) -> list:
    dirs = sorted(run_dir.glob("cycle_*"),
                  key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise FileNotFoundError(f"no cycle_* directories under {run_dir}")
    return dirs


def npv_box_data(run_dir) -> dict:
    """Per-cycle NPV distributions from cycle_*/npv.csv.

    Returns {cycle: {"proxy": [...], "sim": [...], "truth": value-or-None}};
    box values cover the kept realizations (rows with a simulator NPV).
    """
    out = {}
    for cdir in _cycle_dirs(Path(run_dir)):
        cycle = int(cdir.name.split("_")[1])
        rows = _columns(cdir / "npv.csv",
                        ["realization", "proxy_npv_usd", "sim_npv_usd"])
        proxy, sim, truth = [], [], None
        for realization, p, s in rows:
            if realization == "truth":
                truth = float(s) if s else None
            elif s != "":
                proxy.append(float(p))
                sim.append(float(s))
        out[cycle] = {"proxy": proxy, "sim": sim, "truth": truth}
    return out


def npv_box_figure(spec: PlotSpec):
    """Side-by-side proxy (green) and simulator (yellow) NPV boxes per cycle
    with the truth NPV as a red circle. Whiskers at the 10/90th and box at
    the 25/75th percentiles."""
    data = npv_box_data(spec.in_dir)
    cycles = sorted(data)
    fig, ax = plt.subplots(figsize=(1.9 * len(cycles) + 2.2, 4.0))
    width = 0.32
    fig.box_artists = {}
    fig.box_stats = {}
    for kind, color, offset in (("proxy", PROXY_BOX_COLOR, -0.2),
                                ("sim", SIM_BOX_COLOR, 0.2)):
        stats = []
        for c in cycles:
            if not data[c][kind]:
                raise ValueError(f"cycle {c} has no {kind} NPV values")
            stats.append(box_stats(data[c][kind]))
        fig.box_artists[kind] = ax.bxp(
            stats, positions=[c + offset for c in cycles], widths=width,
            showfliers=False, patch_artist=True,
            boxprops={"facecolor": color, "alpha": 0.7},
            medianprops={"color": "red", "lw": 1.4})
        fig.box_stats[kind] = stats
    truth_pts = [(c, data[c]["truth"]) for c in cycles
                 if data[c]["truth"] is not None]
    if truth_pts:
        ax.plot([c for c, _ in truth_pts], [v for _, v in truth_pts], "o",
                color=TRUTH_COLOR, ms=7, mec="black", label="true model",
                zorder=5, ls="")
        ax.legend(fontsize=8)
    ax.set_xticks(list(cycles))
    ax.set_xticklabels([str(c) for c in cycles])
    ax.set_xlabel("control cycle")
    ax.set_ylabel("NPV (USD)")
    ax.set_title("NPV by cycle: proxy (green) vs simulation (yellow)")
    fig.tight_layout()
    return fig


def constraint_trace_figure(spec: PlotSpec):
    """Constrained quantities vs time: kept realizations in gray, truth in
    red, limits as dashed lines. One subplot per constraint."""
    cycle = int(spec.options.get("cycle", 1))
    path = Path(spec.in_dir) / f"cycle_{cycle}" / "constraint_trace.csv"
    rows = _columns(path, ["time_days", "constraint", "realization", "value",
                           "limit"])
    if not rows:
        raise ValueError(f"{path} has no rows")
    series: dict = {}
    limits: dict = {}
    for t, cname, realization, value, limit in rows:
        series.setdefault(cname, {}).setdefault(realization, []).append(
            (float(t), float(value)))
        limits[cname] = float(limit)
    names = sorted(series)
    fig, axes = plt.subplots(len(names), 1, figsize=(6.4, 2.6 * len(names)),
                             squeeze=False)
    for k, cname in enumerate(names):
        ax = axes[k][0]
        for realization, pts in sorted(series[cname].items()):
            pts = np.array(sorted(pts))
            if realization == "truth":
                ax.plot(pts[:, 0], pts[:, 1], color=TRUTH_COLOR, lw=1.6,
                        label="true model")
            else:
                ax.plot(pts[:, 0], pts[:, 1], color="gray", lw=0.7, alpha=0.7)
        ax.axhline(limits[cname], color="black", ls="--", lw=1.2)
        ax.set_title(f"{cname} (cycle {cycle})", fontsize=9)
        ax.set_xlabel("time (days)", fontsize=8)
        ax.set_ylabel("rate (m$^3$/day)", fontsize=8)
        ax.tick_params(labelsize=7)
        handles, labels = ax.get_legend_handles_labels()
        if handles:
            ax.legend(handles[:1], labels[:1], fontsize=7)
    fig.tight_layout()
    return fig


KINDS = {
    "rates": rates_figure,
    "error-rank": error_rank_figure,
    "crossplot": crossplot_figure,
    "npv-box": npv_box_figure,
    "constraint-trace": constraint_trace_figure,
}
