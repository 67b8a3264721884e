"""Command-line frontend: every pipeline stage plus the full closed loop.

All outputs are plain CSV/JSON/binary files with deterministic bytes for a
given configuration and seed. Exit codes: 0 success, 2 configuration error,
3 numerical failure; failures emit a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import clrm as clrm_mod
from . import hm as hm_mod
from . import proxy as proxy_mod
from .config import ConfigError, RunConfig, dumps_toml, load_config
from .geostat import (
    HardData,
    build_pca,
    export_geomodel_csv,
    load_geomodel,
    load_pca,
    sample_realizations,
    save_geomodel,
    save_pca,
)
from .nn import export_manifest
from .resim import RateSeries, SimulationError, load_schedule_csv, simulate
from .robustopt import constraint_value, npv, robust_optimize, save_trace_csv

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.profile)
        seed = args.seed if args.seed is not None else cfg.raw["seed"]
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        args.func(args, cfg, seed, out)
        return 0
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        _fail("config", exc)
        return EXIT_CONFIG
    except (SimulationError, proxy_mod.TrainingDivergedError,
            np.linalg.LinAlgError, ArithmeticError) as exc:
        _fail("numerical", exc)
        return EXIT_NUMERICAL


def _fail(kind, exc):
    print(json.dumps({"error": kind, "type": type(exc).__name__,
                      "detail": str(exc)}), file=sys.stderr)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="clrmlab",
        description="Desk-scale closed-loop reservoir management laboratory.")
    sub = parser.add_subparsers(required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="TOML config overriding the profile")
        p.add_argument("--profile", default=None, choices=["paper", "desk", "micro"])
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", default=".", help="output directory")
        p.set_defaults(func=fn)
        return p

    p = add("generate-models", _cmd_generate_models,
            "sample conditioned log-permeability realizations")
    p.add_argument("--count", type=int, default=None)

    p = add("build-pca", _cmd_build_pca, "build the PCA basis from geomodels")
    p.add_argument("--models", required=True, help="directory of model_*.bin")
    p.add_argument("--count", type=int, default=None)

    p = add("simulate", _cmd_simulate, "run the two-phase simulator once")
    p.add_argument("--model", required=True)
    p.add_argument("--schedule", required=True)

    p = add("make-dataset", _cmd_make_dataset, "simulate a training dataset")
    p.add_argument("--models", required=True)
    p.add_argument("--retrain", action="store_true",
                   help="use the retraining split sizes")
    p.add_argument("--prefix", default=None,
                   help="schedule CSV holding already-operated steps")
    p.add_argument("--prefix-steps", type=int, default=0)

    p = add("train", _cmd_train, "train the rate proxy on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--warm-start", default=None,
                   help="checkpoint to continue from (retraining)")

    p = add("eval-proxy", _cmd_eval_proxy, "evaluate proxy errors on a split")
    p.add_argument("--proxy", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])

    p = add("optimize", _cmd_optimize, "robust PSO optimization of BHPs")
    p.add_argument("--proxy", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--prefix", default=None)
    p.add_argument("--prefix-steps", type=int, default=0)

    p = add("history-match", _cmd_history_match, "RML posterior ensemble")
    p.add_argument("--pca", required=True)
    p.add_argument("--truth-rates", required=True)
    p.add_argument("--schedule", required=True,
                   help="operated schedule over the observation window")
    p.add_argument("--window-days", type=float, required=True)

    add("clrm", _cmd_clrm, "run the full closed loop")

    p = add("report", _cmd_report, "simulation-count ledger and speedups")
    p.add_argument("--ledger", default=None, help="ledger.json from a run")

    return parser


def _model_files(path):
    files = sorted(Path(path).glob("model_*.bin"))
    if not files:
        raise FileNotFoundError(f"no model_*.bin files under {path}")
    return files


def _load_models(path, count=None):
    files = _model_files(path)
    if count is not None:
        files = files[:count]
    return [load_geomodel(f) for f in files]


def _well_names(cfg):
    return [w.name for w in cfg.wells()]


def _cmd_generate_models(args, cfg: RunConfig, seed, out):
    grid = cfg.grid()
    vario = cfg.variogram()
    wells = cfg.wells()
    clrm_cfg = cfg.raw["clrm"]
    count = args.count or (clrm_cfg["n_pca_models"] + clrm_cfg["n_truth_models"])
    hd_cells = np.sort(np.concatenate([w.cells(grid) for w in wells]))
    reference = sample_realizations(grid, vario, HardData.empty(), 1,
                                    seed=(seed, clrm_mod._SEED_HARD_DATA))[0]
    hard_data = HardData(hd_cells, reference.logk[hd_cells])
    models = sample_realizations(grid, vario, hard_data, count,
                                 seed=(seed, clrm_mod._SEED_MODELS))
    for i, gm in enumerate(models):
        save_geomodel(out / f"model_{i:03d}.bin", gm)
        export_geomodel_csv(out / f"model_{i:03d}.csv", gm)
    (out / "hard_data.json").write_text(json.dumps(
        {"cells": hd_cells.tolist(), "values": hard_data.values.tolist()},
        indent=2, sort_keys=True))
    print(f"wrote {count} geomodels to {out}")


def _cmd_build_pca(args, cfg, seed, out):
    count = args.count or cfg.raw["clrm"]["n_pca_models"]
    models = _load_models(args.models, count)
    basis = build_pca(models, cfg.raw["clrm"]["energy_target"])
    save_pca(out / "pca.bin", basis)
    (out / "pca.json").write_text(json.dumps({
        "n_models": len(models),
        "latent_dimension": basis.l,
        "energy_fraction": basis.energy_fraction,
        "energy_target": basis.energy_target,
    }, indent=2, sort_keys=True))
    print(f"PCA basis: l = {basis.l}, retained energy = "
          f"{basis.energy_fraction:.4f}")


def _cmd_simulate(args, cfg, seed, out):
    model = load_geomodel(args.model)
    schedule = load_schedule_csv(args.schedule, _well_names(cfg),
                                 cfg.raw["controls"]["t_cs_days"], cfg.bounds())
    rates = simulate(model, cfg.fluid(), cfg.wells(), schedule, cfg.numerics())
    rates.save_csv(out / "rates.csv")
    print(f"simulated {schedule.horizon_days:.0f} days -> {out / 'rates.csv'}")


def _read_prefix(args, cfg):
    if args.prefix is None:
        return None
    sched = load_schedule_csv(args.prefix, _well_names(cfg),
                              cfg.raw["controls"]["t_cs_days"], cfg.bounds())
    steps = args.prefix_steps or sched.n_cs
    return sched.bhp[:, :steps]


def _cmd_make_dataset(args, cfg, seed, out):
    clrm_cfg = cfg.raw["clrm"]
    controls = cfg.raw["controls"]
    if args.retrain:
        n_b_train, n_b_test = (clrm_cfg["n_b_train_retrain"],
                               clrm_cfg["n_b_test_retrain"])
    else:
        n_b_train, n_b_test = clrm_cfg["n_b_train"], clrm_cfg["n_b_test"]
    models = _load_models(args.models, clrm_cfg["n_realizations"])
    ds = proxy_mod.make_dataset(
        models, cfg.wells(), cfg.fluid(), cfg.bounds(), controls["t_cs_days"],
        controls["n_cs"], n_b_train, n_b_test,
        seed=(seed, clrm_mod._SEED_DATASET), fixed_prefix=_read_prefix(args, cfg),
        numerics=cfg.numerics(), threads=args.threads)
    proxy_mod.save_dataset(out, ds)
    print(f"dataset: {len(ds.schedules)} samples "
          f"({len(ds.train_idx)} train, {len(ds.test_idx)} test) -> {out}")


def _cmd_train(args, cfg, seed, out):
    ds = proxy_mod.load_dataset(args.dataset)
    if args.warm_start:
        model = proxy_mod.load_proxy(args.warm_start)
        model, history = proxy_mod.retrain(model, ds, cfg.retrain_config())
    else:
        model = proxy_mod.build_proxy(
            cfg.proxy_config(), seed=(seed, clrm_mod._SEED_PROXY),
            inj_names=[w.name for w in cfg.wells() if w.kind == "injector"],
            prod_names=[w.name for w in cfg.wells() if w.kind == "producer"])
        model, history = proxy_mod.train(model, ds, cfg.train_config())
    proxy_mod.save_proxy(out / "proxy.bin", model)
    export_manifest(out / "proxy_manifest.json", model.store)
    with open(out / "training_history.csv", "w", newline="") as f:
        import csv as _csv
        w = _csv.writer(f)
        w.writerow(["epoch", "loss", "e_train", "e_test", "lr"])
        for row in history:
            w.writerow([row[0]] + ["%.12g" % v for v in row[1:]])
    print(f"trained {len(history)} epochs; final E_train = {history[-1][2]:.4f}")


def _cmd_eval_proxy(args, cfg, seed, out):
    ds = proxy_mod.load_dataset(args.dataset)
    model = proxy_mod.load_proxy(args.proxy)
    errs = proxy_mod.per_sample_errors(model, ds, args.split)
    if not len(errs):
        raise ConfigError(f"dataset split {args.split!r} is empty")
    p10, p50, p90 = np.percentile(errs, [10, 50, 90])
    print(f"E ({args.split}) = {errs.mean():.4f}")
    print(f"E^i percentiles: P10 = {p10:.4f}, P50 = {p50:.4f}, P90 = {p90:.4f}")
    order = np.argsort(errs)
    with open(out / "error_rank.csv", "w", newline="") as f:
        import csv as _csv
        w = _csv.writer(f)
        w.writerow(["rank", "sample", "error"])
        for rank, s in enumerate(order, start=1):
            w.writerow([rank, int(s), "%.12g" % errs[s]])
    idx = ds.train_idx if args.split == "train" else ds.test_idx
    rows = []
    for s in idx:
        sim_r = ds.targets[s]
        prox_r = proxy_mod.forward(model, ds.models[ds.model_index[s]],
                                   ds.schedules[s])
        dt = np.diff(sim_r.report_times)
        for label, sim_m, prox_m in (
            ("cum_oil_m3", sim_r.prod_oil.sum(0), prox_r.prod_oil.sum(0)),
            ("cum_water_m3", sim_r.prod_water.sum(0), prox_r.prod_water.sum(0)),
            ("cum_inj_m3", sim_r.inj_water.sum(0), prox_r.inj_water.sum(0)),
        ):
            rows.append((label, int(s), float(np.sum(sim_m[:-1] * dt)),
                         float(np.sum(prox_m[:-1] * dt))))
        for c in cfg.constraints():
            rows.append((f"max_{c.label()}", int(s),
                         constraint_value(sim_r, c), constraint_value(prox_r, c)))
    with open(out / "crossplot.csv", "w", newline="") as f:
        import csv as _csv
        w = _csv.writer(f)
        w.writerow(["quantity", "sample", "simulator", "proxy"])
        for row in rows:
            w.writerow([row[0], row[1], "%.12g" % row[2], "%.12g" % row[3]])
    # per-sample rate overlays for the median-error test case
    median_sample = int(order[len(order) // 2])
    ds.targets[median_sample].save_csv(out / "rates_sim_median.csv")
    proxy_mod.forward(model, ds.models[ds.model_index[median_sample]],
                      ds.schedules[median_sample]).save_csv(
        out / "rates_proxy_median.csv")


def _cmd_optimize(args, cfg, seed, out):
    models = _load_models(args.models, cfg.raw["clrm"]["n_realizations"])
    model = proxy_mod.load_proxy(args.proxy)
    evaluator = proxy_mod.ProxyEvaluator(model, models)
    controls = cfg.raw["controls"]
    result = robust_optimize(
        evaluator, cfg.economics(), cfg.constraints(), cfg.bounds(),
        controls["t_cs_days"], controls["n_cs"],
        fixed_prefix=_read_prefix(args, cfg), settings=cfg.pso_settings(),
        seed=(seed, clrm_mod._SEED_PSO))
    result.schedule.save_csv(out / "best_schedule.csv", _well_names(cfg))
    save_trace_csv(out / "pso_trace.csv", result.trace)
    (out / "optimize_result.json").write_text(json.dumps({
        "best_j": result.best_j,
        "best_h": result.best_h,
        "expected_npv": -result.best_j,
        "kept": [int(i) for i in result.kept],
        "evaluations": result.evaluations,
    }, indent=2, sort_keys=True))
    print(f"best J = {result.best_j:.6g} (h = {result.best_h:.3g}); "
          f"schedule -> {out / 'best_schedule.csv'}")


def _cmd_history_match(args, cfg, seed, out):
    basis = load_pca(args.pca)
    truth_rates = RateSeries.load_csv(args.truth_rates)
    schedule = load_schedule_csv(args.schedule, _well_names(cfg),
                                 cfg.raw["controls"]["t_cs_days"], cfg.bounds())
    obs_times = hm_mod.observation_times(args.window_days,
                                         cfg.raw["hm"]["obs_interval_days"])
    fluid, wells, numerics = cfg.fluid(), cfg.wells(), cfg.numerics()

    def forward(xi):
        from .geostat import pca_to_model
        rates = simulate(pca_to_model(basis, xi), fluid, wells, schedule,
                         numerics)
        return hm_mod.extract_observations(rates, obs_times)

    posterior = hm_mod.posterior_ensemble(
        basis, forward, truth_rates, obs_times,
        cfg.raw["clrm"]["n_realizations"], seed=(seed, clrm_mod._SEED_HM),
        solver=cfg.lm_settings(), noise_frac=cfg.raw["hm"]["noise_frac"],
        noise_floor=cfg.raw["hm"]["noise_floor"],
        map_runs=lambda fn, xs: proxy_mod.parallel_map(fn, xs, args.threads))
    for i, gm in enumerate(posterior.models):
        save_geomodel(out / f"model_{i:03d}.bin", gm)
    posterior.save_report(out / "hm_report.json")
    dec = sum(1 for r in posterior.runs if r.mismatch_final < r.mismatch_initial)
    print(f"{len(posterior.models)} posterior models; mismatch decreased in "
          f"{dec}/{len(posterior.runs)} runs; {posterior.total_simulations} "
          f"simulations")


def _cmd_clrm(args, cfg, seed, out):
    result = clrm_mod.run_clrm(cfg, seed, out_dir=out, threads=args.threads)
    last = result.summary["cycles"][-1]
    print(f"completed {len(result.records)} cycles; final expected simulator "
          f"NPV = {last['expected_sim_npv']:.6g} USD")
    print(f"ledger: {json.dumps(result.ledger.as_dict())}")


def _cmd_report(args, cfg, seed, out):
    actual = None
    hm_actual = None
    if args.ledger:
        data = json.loads(Path(args.ledger).read_text())
        hm_actual = data.get("actual", {}).get("hm_sims", data.get("hm_sims_used"))
    report = clrm_mod.ledger_report(cfg, hm_actual_sims=hm_actual)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"proxy-side training simulations: {report['proxy_training_sims']:,}")
    print(f"counterfactual simulation-based optimization: "
          f"{report['counterfactual_optimization_sims']:,}")
    print(f"history-matching simulations: {report['hm_sims_formula']:,}")
    print(f"totals: {report['total_traditional']:,} traditional vs "
          f"{report['total_proxy_based']:,} proxy-based")
    print(f"optimization speedup: {report['optimization_speedup']}")
    print(f"total speedup: {report['total_speedup']}")


if __name__ == "__main__":
    sys.exit(main())
