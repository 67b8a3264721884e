"""Closed-loop driver: train, optimize, operate, observe, match, retrain.

One run generates a conditioned prior ensemble plus synthetic truth models,
builds the PCA basis, trains the rate proxy, and then alternates robust
optimization (proxy-driven PSO) with operation of the truth model and RML
history matching. Past control steps are frozen once operated; the truth
geomodel is only ever read through noisy observations.

The ledger counts actual simulator runs by purpose and reproduces the
published-formula counterfactuals from the configuration alone.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, dumps_toml
from .geostat import HardData, build_pca, sample_realizations, save_geomodel
from .hm import extract_observations, observation_times, posterior_ensemble
from .proxy import (
    ProxyEvaluator,
    SimulatorEvaluator,
    build_proxy,
    make_dataset,
    parallel_map,
    retrain,
    train,
)
from .resim import BhpSchedule, simulate
from .robustopt import (
    PsoSettings,
    constraint_value,
    npv,
    robust_optimize,
    save_trace_csv,
    select_realizations,
)

_SEED_HARD_DATA = 11
_SEED_MODELS = 12
_SEED_DATASET = 13
_SEED_PROXY = 14
_SEED_PSO = 15
_SEED_HM = 16
_SEED_RETRAIN = 17


@dataclass
class Ledger:
    training_sims: int = 0      # dataset runs, train + test splits
    hm_sims: int = 0
    validation_sims: int = 0    # simulator NPV checks of optimized schedules
    truth_sims: int = 0         # operating the synthetic truth

    def as_dict(self) -> dict:
        return {
            "training_sims": self.training_sims,
            "hm_sims": self.hm_sims,
            "validation_sims": self.validation_sims,
            "truth_sims": self.truth_sims,
        }


def ledger_report(cfg: RunConfig, actual: Ledger | None = None,
                  hm_actual_sims: int | None = None) -> dict:
    """Simulation-count arithmetic: actual proxy-side cost, the
    simulation-based counterfactual, and the resulting speedups.

    All formula fields are recomputed from the configuration; nothing is
    hard-coded. The history-matching counterfactual uses the configured
    per-run equivalent-simulation figure (adjoint economics), while
    hm_actual_sims may report what this artifact actually spent.
    """
    clrm = cfg.raw["clrm"]
    pso = cfg.raw["pso"]
    n_r = clrm["n_realizations"]
    n_cyc = clrm["n_cycles"]
    training = n_r * clrm["n_b_train"] + (n_cyc - 1) * n_r * clrm["n_b_train_retrain"]
    counterfactual_opt = n_cyc * pso["n_particles"] * pso["n_iterations"] * n_r
    hm_formula = (n_cyc - 1) * cfg.raw["hm"]["equiv_sims_per_run"] * n_r
    hm_used = hm_formula if hm_actual_sims is None else hm_actual_sims
    total_traditional = counterfactual_opt + hm_formula
    total_proxy = training + hm_used
    report = {
        "proxy_training_sims": training,
        "counterfactual_optimization_sims": counterfactual_opt,
        "hm_sims_formula": hm_formula,
        "hm_sims_used": hm_used,
        "total_traditional": total_traditional,
        "total_proxy_based": total_proxy,
        "optimization_speedup": round(counterfactual_opt / training, 2),
        "total_speedup": round(total_traditional / total_proxy, 2),
    }
    if actual is not None:
        report["actual"] = actual.as_dict()
    return report


@dataclass
class CycleRecord:
    cycle: int
    schedule: BhpSchedule
    free_steps: int
    best_j: float
    best_h: float
    kept: np.ndarray
    proxy_npvs: np.ndarray        # all realizations at the optimum
    sim_npvs: dict                # realization index -> simulator NPV (kept only)
    truth_npv: float
    constraint_values_proxy: np.ndarray
    sim_constraint_ok: dict       # realization index -> bool (all constraints)
    trace: list
    epochs: int                   # training epochs spent before this cycle
    train_history: list           # (epoch, loss, e_train, e_test, lr) rows
    hm_report: list | None        # RML run rows that produced this ensemble
    validation_rates: dict        # realization index -> RateSeries
    truth_rates: object


@dataclass
class ClrmResult:
    records: list
    ledger: Ledger
    summary: dict


def free_variable_count(n_wells: int, n_cs: int, cycle: int) -> int:
    """Optimization variables at a cycle: wells times remaining steps."""
    return n_wells * (n_cs - cycle + 1)


def expected_npv_over(models, schedule, fluid, wells, numerics, econ, threads=1):
    """Trimmed-mean simulator NPV of a schedule over an ensemble."""
    rates = parallel_map(
        lambda m: simulate(m, fluid, wells, schedule, numerics), models, threads)
    npvs = np.array([npv(r, econ) for r in rates])
    kept = select_realizations(npvs)
    return float(npvs[kept].mean()), npvs, kept


def run_clrm(cfg: RunConfig, seed: int, out_dir=None, threads: int = 1,
             evaluator_factory=None) -> ClrmResult:
    """Execute the full closed loop and optionally write the run directory.

    evaluator_factory(proxy_model, ensemble) may replace the proxy evaluator
    (e.g. with a SimulatorEvaluator for an all-simulation reference run).
    """
    grid = cfg.grid()
    vario = cfg.variogram()
    wells = cfg.wells()
    fluid = cfg.fluid()
    numerics = cfg.numerics()
    econ = cfg.economics()
    constraints = cfg.constraints()
    bounds = cfg.bounds()
    clrm_cfg = cfg.raw["clrm"]
    controls = cfg.raw["controls"]
    t_cs = controls["t_cs_days"]
    n_cs = controls["n_cs"]
    n_cyc = clrm_cfg["n_cycles"]
    n_r = clrm_cfg["n_realizations"]
    n_rp = clrm_cfg["n_pca_models"]
    ledger = Ledger()

    # hard data at every perforated layer of every well column, sampled from
    # one unconditioned reference field so truth and priors share it
    hd_cells = np.sort(np.concatenate([w.cells(grid) for w in wells]))
    reference = sample_realizations(grid, vario, HardData.empty(), 1,
                                    seed=(seed, _SEED_HARD_DATA))[0]
    hard_data = HardData(hd_cells, reference.logk[hd_cells])

    all_models = sample_realizations(
        grid, vario, hard_data, n_rp + clrm_cfg["n_truth_models"],
        seed=(seed, _SEED_MODELS))
    basis = build_pca(all_models[:n_rp], clrm_cfg["energy_target"])
    truth = all_models[n_rp + clrm_cfg["truth_index"]]
    ensemble = list(all_models[:n_r])

    ds = make_dataset(ensemble, wells, fluid, bounds, t_cs, n_cs,
                      clrm_cfg["n_b_train"], clrm_cfg["n_b_test"],
                      seed=(seed, _SEED_DATASET), numerics=numerics,
                      threads=threads)
    ledger.training_sims += len(ds.schedules)
    proxy_model = build_proxy(cfg.proxy_config(), seed=(seed, _SEED_PROXY),
                              inj_names=[w.name for w in wells if w.kind == "injector"],
                              prod_names=[w.name for w in wells if w.kind == "producer"])
    proxy_model, history = train(proxy_model, ds, cfg.train_config())
    train_histories = [history]

    operated = np.empty((len(wells), 0))
    records = []
    hm_report_next = None

    for cycle in range(1, n_cyc + 1):
        if evaluator_factory is not None:
            evaluator = evaluator_factory(proxy_model, ensemble)
        else:
            evaluator = ProxyEvaluator(proxy_model, ensemble)
        result = robust_optimize(
            evaluator, econ, constraints, bounds, t_cs, n_cs,
            fixed_prefix=operated, settings=cfg.pso_settings(),
            seed=_subseed(seed, _SEED_PSO, cycle))

        # simulator validation of the optimum over the kept realizations
        kept_models = [ensemble[i] for i in result.kept]
        val_rates = parallel_map(
            lambda m: simulate(m, fluid, wells, result.schedule, numerics),
            kept_models, threads)
        ledger.validation_sims += len(kept_models)
        sim_npvs = {int(i): npv(r, econ)
                    for i, r in zip(result.kept, val_rates)}
        sim_ok = {int(i): all(constraint_value(r, c) <= c.limit + 1e-9
                              for c in constraints)
                  for i, r in zip(result.kept, val_rates)}

        truth_rates = simulate(truth, fluid, wells, result.schedule, numerics)
        ledger.truth_sims += 1

        records.append(CycleRecord(
            cycle=cycle,
            schedule=result.schedule,
            free_steps=n_cs - cycle + 1,
            best_j=result.best_j,
            best_h=result.best_h,
            kept=result.kept,
            proxy_npvs=result.npvs,
            sim_npvs=sim_npvs,
            truth_npv=npv(truth_rates, econ),
            constraint_values_proxy=result.constraint_values,
            sim_constraint_ok=sim_ok,
            trace=result.trace,
            epochs=len(train_histories[-1]),
            train_history=train_histories[-1],
            hm_report=hm_report_next,
            validation_rates={int(i): r for i, r in zip(result.kept, val_rates)},
            truth_rates=truth_rates,
        ))
        hm_report_next = None

        # operate the first free step, then assimilate before the next cycle
        operated = np.concatenate(
            [operated, result.schedule.bhp[:, cycle - 1:cycle]], axis=1)
        if cycle == n_cyc:
            break

        operated_schedule = BhpSchedule(t_cs, operated, bounds)
        truth_hist = simulate(truth, fluid, wells, operated_schedule, numerics)
        ledger.truth_sims += 1
        obs_times = observation_times(cycle * t_cs,
                                      cfg.raw["hm"]["obs_interval_days"])

        def hm_forward(xi, _sched=operated_schedule, _times=obs_times):
            from .geostat import pca_to_model
            rates = simulate(pca_to_model(basis, xi), fluid, wells, _sched,
                             numerics)
            return extract_observations(rates, _times)

        posterior = posterior_ensemble(
            basis, hm_forward, truth_hist, obs_times, n_r,
            seed=_subseed(seed, _SEED_HM, cycle), solver=cfg.lm_settings(),
            noise_frac=cfg.raw["hm"]["noise_frac"],
            noise_floor=cfg.raw["hm"]["noise_floor"],
            map_runs=lambda fn, xs: parallel_map(fn, xs, threads))
        ledger.hm_sims += posterior.total_simulations
        ensemble = posterior.models
        hm_report_next = posterior.report()

        ds_new = make_dataset(ensemble, wells, fluid, bounds, t_cs, n_cs,
                              clrm_cfg["n_b_train_retrain"],
                              clrm_cfg["n_b_test_retrain"],
                              seed=_subseed(seed, _SEED_RETRAIN, cycle),
                              fixed_prefix=operated, numerics=numerics,
                              threads=threads)
        ledger.training_sims += len(ds_new.schedules)
        retrain_cfg = cfg.retrain_config()
        proxy_model, history = retrain(proxy_model, ds_new, retrain_cfg)
        train_histories.append(history)

    # final-knowledge comparison: both the final composite schedule and the
    # first-cycle schedule evaluated on the final ensemble by the simulator
    final_npv, _, _ = expected_npv_over(ensemble, records[-1].schedule, fluid,
                                        wells, numerics, econ, threads)
    u1_npv, _, _ = expected_npv_over(ensemble, records[0].schedule, fluid,
                                     wells, numerics, econ, threads)
    ledger.validation_sims += 2 * len(ensemble)

    summary = {
        "seed": seed,
        "profile": cfg.raw["profile"],
        "pca_latent_dimension": basis.l,
        "pca_energy_fraction": basis.energy_fraction,
        "cycles": [{
            "cycle": r.cycle,
            "free_variables": free_variable_count(len(wells), n_cs, r.cycle),
            "best_j": r.best_j,
            "best_h": r.best_h,
            "expected_proxy_npv": float(r.proxy_npvs[r.kept].mean()),
            "expected_sim_npv": float(np.mean(list(r.sim_npvs.values()))),
            "sim_npv_iqr": _iqr(list(r.sim_npvs.values())),
            "truth_npv": r.truth_npv,
            "all_kept_feasible_proxy": bool(r.best_h == 0.0),
            "all_kept_feasible_sim": bool(all(r.sim_constraint_ok.values())),
            "training_epochs": r.epochs,
            "hm_runs_converged": (None if r.hm_report is None else
                                  sum(1 for row in r.hm_report if row["converged"])),
            "hm_mismatch_decreased": (None if r.hm_report is None else
                                      sum(1 for row in r.hm_report
                                          if row["mismatch_final"] < row["mismatch_initial"])),
        } for r in records],
        "final_schedule_expected_sim_npv_on_final_ensemble": final_npv,
        "cycle1_schedule_expected_sim_npv_on_final_ensemble": u1_npv,
        "ledger": ledger_report(cfg, ledger, hm_actual_sims=ledger.hm_sims),
    }

    summary = _jsonify(summary)
    result = ClrmResult(records=records, ledger=ledger, summary=summary)
    if out_dir is not None:
        write_run_directory(out_dir, cfg, result, ensemble)
    return result


def _subseed(seed, tag, cycle):
    from .seeds import seed_tuple
    return seed_tuple(seed) + (tag, cycle)


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _iqr(values) -> float:
    return float(np.percentile(values, 75) - np.percentile(values, 25))


def write_run_directory(out_dir, cfg: RunConfig, result: ClrmResult, ensemble):
    """Persist the documented run layout: config snapshot, per-cycle files,
    final ensemble, ledger and summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dumps_toml(cfg.raw))
    (out / "config_sources.json").write_text(
        json.dumps(cfg.sources, indent=2, sort_keys=True))
    well_names = [w.name for w in cfg.wells()]
    constraints = cfg.constraints()
    for rec in result.records:
        cdir = out / f"cycle_{rec.cycle}"
        cdir.mkdir(exist_ok=True)
        rec.schedule.save_csv(cdir / "schedule.csv", well_names)
        save_trace_csv(cdir / "pso_trace.csv", rec.trace)
        with open(cdir / "training_history.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "e_train", "e_test", "lr"])
            for row in rec.train_history:
                w.writerow([row[0]] + ["%.12g" % v for v in row[1:]])
        with open(cdir / "npv.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["realization", "proxy_npv_usd", "sim_npv_usd"])
            for i, value in enumerate(rec.proxy_npvs):
                sim_val = rec.sim_npvs.get(i, "")
                w.writerow([i, "%.12g" % value,
                            "" if sim_val == "" else "%.12g" % sim_val])
            w.writerow(["truth", "", "%.12g" % rec.truth_npv])
        with open(cdir / "constraint_trace.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time_days", "constraint", "realization", "value",
                        "limit"])
            for c in constraints:
                for i, rates in rec.validation_rates.items():
                    series = _constraint_series(rates, c)
                    for t, v in zip(rates.report_times, series):
                        w.writerow(["%.12g" % t, c.label(), i, "%.12g" % v,
                                    "%.12g" % c.limit])
                series = _constraint_series(rec.truth_rates, c)
                for t, v in zip(rec.truth_rates.report_times, series):
                    w.writerow(["%.12g" % t, c.label(), "truth", "%.12g" % v,
                                "%.12g" % c.limit])
        if rec.hm_report is not None:
            (cdir / "hm_report.json").write_text(
                json.dumps({"runs": rec.hm_report}, indent=2, sort_keys=True))
    ens_dir = out / "final_ensemble"
    ens_dir.mkdir(exist_ok=True)
    for i, gm in enumerate(ensemble):
        save_geomodel(ens_dir / f"model_{i:03d}.bin", gm)
    (out / "ledger.json").write_text(
        json.dumps(result.summary["ledger"], indent=2, sort_keys=True))
    (out / "summary.json").write_text(
        json.dumps(result.summary, indent=2, sort_keys=True))


def _constraint_series(rates, cs):
    if cs.phase == "water_injection":
        if cs.scope == "field":
            return rates.inj_water.sum(axis=0)
        return rates.inj_water[rates.inj_names.index(cs.scope)]
    if cs.scope == "field":
        return rates.prod_water.sum(axis=0)
    return rates.prod_water[rates.prod_names.index(cs.scope)]
