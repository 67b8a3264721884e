"""Declarative run configuration: profiles, TOML loading, and builders.

A configuration is a nested dict with a fixed schema. The `paper` profile
encodes the published experiment constants verbatim; the `desk` profile is a
shrunken analogue sized for CI hardware; `micro` is a minutes-scale smoke
setup. A user TOML file overrides a profile key-by-key, and environment
variables with the CLRMLAB_ prefix override both (double underscore nests,
e.g. CLRMLAB_CLRM__N_CYCLES=2).
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .geostat import GridSpec, VariogramSpec
from .hm import LmSettings
from .proxy import ProxyConfig, TrainConfig
from .resim import CoreyRelPerm, FluidSpec, SolverSettings, WellSpec, fully_penetrating
from .robustopt import ConstraintSpec, EconParams, PsoSettings

ENV_PREFIX = "CLRMLAB_"


class ConfigError(ValueError):
    pass


def _paper_profile() -> dict:
    return {
        "profile": "paper",
        "seed": 0,
        "grid": {"nx": 40, "ny": 40, "nz": 8, "dx": 15.0, "dy": 15.0, "dz": 4.0},
        "variogram": {
            "sill": 2.25,           # sd 1.5
            "mean": 4.79,
            "r_max": 375.0,         # 25 dx
            "r_mid": 120.0,         # 8 dx
            "r_min": 8.0,           # 2 dz
            "azimuth_deg": 30.0,
        },
        "fluid": {
            "mu_o": 2.0, "mu_w": 1.0, "porosity": 0.2,
            "swc": 0.1, "sor": 0.1, "krw_end": 0.4, "kro_end": 0.9,
            "nw": 2.0, "no": 2.0, "sw_init": 0.1, "p_init": 400.0,
        },
        # well coordinates are not published; this layout spreads four
        # producers toward the corners with three interior injectors
        "wells": [
            {"name": "INJ1", "kind": "injector", "i": 20, "j": 20},
            {"name": "INJ2", "kind": "injector", "i": 13, "j": 26},
            {"name": "INJ3", "kind": "injector", "i": 26, "j": 13},
            {"name": "PRD1", "kind": "producer", "i": 8, "j": 8},
            {"name": "PRD2", "kind": "producer", "i": 31, "j": 8},
            {"name": "PRD3", "kind": "producer", "i": 8, "j": 31},
            {"name": "PRD4", "kind": "producer", "i": 31, "j": 31},
        ],
        "controls": {
            "inj_bhp": [325.0, 335.0],
            "prod_bhp": [300.0, 315.0],
            "t_cs_days": 180.0,
            "n_cs": 5,
        },
        "economics": {
            "price_oil": 74.0, "cost_water_prod": 5.0, "cost_water_inj": 9.0,
            "discount_rate": 0.1, "m3_to_stb": 6.28981,
        },
        "constraints": [
            {"scope": "field", "phase": "water_injection", "limit": 1400.0},
            {"scope": "INJ1", "phase": "water_injection", "limit": 1100.0},
            {"scope": "INJ2", "phase": "water_injection", "limit": 1100.0},
            {"scope": "INJ3", "phase": "water_injection", "limit": 1100.0},
            {"scope": "field", "phase": "water_production", "limit": 1100.0},
        ],
        "proxy": {
            "n_neu": 200,
            "cell_activation": "relu",
            "lr": 1e-3, "lr_low": 1e-4, "tol": 0.05, "max_epochs": 20000,
            "plateau_patience": 0,
            "retrain_lr": 1e-4, "retrain_max_epochs": 20000,
        },
        "pso": {"n_particles": 35, "n_iterations": 30, "neighborhood": 5},
        "hm": {
            "obs_interval_days": 90.0,
            "noise_frac": 0.02, "noise_floor": 0.5,
            "max_iterations": 4, "fd_step": 1e-4, "rel_tol": 1e-3,
            "max_rejects": 6,
            "equiv_sims_per_run": 110,  # published adjoint-economics figure
        },
        "clrm": {
            "n_cycles": 5,
            "n_realizations": 20,
            "n_pca_models": 400,
            "n_truth_models": 5,
            "truth_index": 0,
            "energy_target": 0.85,
            "n_b_train": 15, "n_b_test": 10,
            "n_b_train_retrain": 10, "n_b_test_retrain": 2,
        },
        "numerics": {
            "pressure_dt_days": 15.0, "cfl": 0.5, "sat_tol": 1e-7,
            "max_halvings": 12, "cg_rtol": 1e-12, "cg_maxiter": 40000,
        },
    }


def _desk_profile() -> dict:
    cfg = _paper_profile()
    cfg.update({"profile": "desk"})
    cfg["grid"].update({"nx": 20, "ny": 20})
    cfg["variogram"].update({"r_max": 150.0, "r_mid": 90.0})
    cfg["wells"] = [
        {"name": "INJ1", "kind": "injector", "i": 5, "j": 5},
        {"name": "INJ2", "kind": "injector", "i": 14, "j": 14},
        {"name": "PRD1", "kind": "producer", "i": 14, "j": 5},
        {"name": "PRD2", "kind": "producer", "i": 5, "j": 14},
    ]
    cfg["controls"].update({"n_cs": 3})
    cfg["constraints"] = [
        {"scope": "field", "phase": "water_injection", "limit": 700.0},
        {"scope": "INJ1", "phase": "water_injection", "limit": 550.0},
        {"scope": "INJ2", "phase": "water_injection", "limit": 550.0},
        {"scope": "field", "phase": "water_production", "limit": 450.0},
    ]
    cfg["proxy"].update({"n_neu": 50, "plateau_patience": 300,
                         "max_epochs": 12000, "retrain_max_epochs": 4000})
    cfg["pso"].update({"n_particles": 20, "n_iterations": 15})
    cfg["hm"].update({"max_iterations": 2})
    cfg["clrm"].update({
        "n_cycles": 3, "n_realizations": 10, "n_pca_models": 30,
        "n_truth_models": 3, "n_b_train": 5, "n_b_test": 2,
        "n_b_train_retrain": 4, "n_b_test_retrain": 1,
    })
    return cfg


def _micro_profile() -> dict:
    cfg = _desk_profile()
    cfg.update({"profile": "micro"})
    cfg["grid"].update({"nx": 8, "ny": 8})
    cfg["variogram"].update({"r_max": 90.0, "r_mid": 60.0})
    cfg["wells"] = [
        {"name": "INJ1", "kind": "injector", "i": 1, "j": 1},
        {"name": "INJ2", "kind": "injector", "i": 6, "j": 6},
        {"name": "PRD1", "kind": "producer", "i": 6, "j": 1},
        {"name": "PRD2", "kind": "producer", "i": 1, "j": 6},
    ]
    cfg["controls"].update({"n_cs": 2})
    cfg["constraints"] = [
        {"scope": "field", "phase": "water_injection", "limit": 600.0},
        {"scope": "field", "phase": "water_production", "limit": 500.0},
    ]
    cfg["proxy"].update({"n_neu": 10, "tol": 0.3, "max_epochs": 150,
                         "retrain_max_epochs": 60, "plateau_patience": 0})
    cfg["pso"].update({"n_particles": 5, "n_iterations": 3})
    cfg["hm"].update({"max_iterations": 1})
    cfg["clrm"].update({
        "n_cycles": 2, "n_realizations": 10, "n_pca_models": 12,
        "n_truth_models": 1, "n_b_train": 1, "n_b_test": 1,
        "n_b_train_retrain": 1, "n_b_test_retrain": 1,
    })
    return cfg


PROFILES = {"paper": _paper_profile, "desk": _desk_profile, "micro": _micro_profile}


def profile_defaults(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name]()


def _merge(base: dict, override: dict, path="", sources=None, origin="user"):
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where, sources, origin)
        else:
            base[key] = value
            if sources is not None:
                sources[where] = origin


def _flatten_keys(d: dict, path=""):
    for key, value in d.items():
        where = f"{path}.{key}" if path else key
        if isinstance(value, dict):
            yield from _flatten_keys(value, where)
        else:
            yield where


def _env_overrides(environ) -> dict:
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        try:
            node[parts[-1]] = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            node[parts[-1]] = raw
    return out


@dataclass
class RunConfig:
    raw: dict
    sources: dict  # dotted key -> "paper default" | "desk default" | ... | "user" | "env"

    # ---- builders for the domain objects -------------------------------

    def grid(self) -> GridSpec:
        g = self.raw["grid"]
        return GridSpec(g["nx"], g["ny"], g["nz"], g["dx"], g["dy"], g["dz"])

    def variogram(self) -> VariogramSpec:
        v = self.raw["variogram"]
        return VariogramSpec(sill=v["sill"], r_max=v["r_max"], r_mid=v["r_mid"],
                             r_min=v["r_min"], azimuth_deg=v["azimuth_deg"],
                             mean=v["mean"])

    def wells(self) -> list:
        grid = self.grid()
        out = []
        for w in self.raw["wells"]:
            out.append(fully_penetrating(w["name"], w["kind"], w["i"], w["j"],
                                         grid, w.get("r_w", 0.1)))
        inj = [w for w in out if w.kind == "injector"]
        prod = [w for w in out if w.kind == "producer"]
        if not inj or not prod:
            raise ConfigError("need at least one injector and one producer")
        return inj + prod  # injectors first, matching the stream ordering

    def fluid(self) -> FluidSpec:
        f = self.raw["fluid"]
        return FluidSpec(
            mu_o=f["mu_o"], mu_w=f["mu_w"], porosity=f["porosity"],
            relperm=CoreyRelPerm(f["swc"], f["sor"], f["krw_end"],
                                 f["kro_end"], f["nw"], f["no"]),
            sw_init=f["sw_init"], p_init=f["p_init"])

    def bounds(self) -> np.ndarray:
        c = self.raw["controls"]
        rows = []
        for w in self.wells():
            rows.append(c["inj_bhp"] if w.kind == "injector" else c["prod_bhp"])
        return np.asarray(rows, dtype=np.float64)

    def economics(self) -> EconParams:
        e = self.raw["economics"]
        return EconParams(e["price_oil"], e["cost_water_prod"],
                          e["cost_water_inj"], e["discount_rate"], e["m3_to_stb"])

    def constraints(self) -> list:
        return [ConstraintSpec(c["scope"], c["phase"], c["limit"])
                for c in self.raw["constraints"]]

    def proxy_config(self) -> ProxyConfig:
        g, c, p = self.raw["grid"], self.raw["controls"], self.raw["proxy"]
        wells = self.wells()
        n_inj = sum(1 for w in wells if w.kind == "injector")
        horizon = c["t_cs_days"] * c["n_cs"]
        n_t = int(round(horizon / 30.0)) + 1
        return ProxyConfig(
            nx=g["nx"], ny=g["ny"], nz=g["nz"], n_inj=n_inj,
            n_prod=len(wells) - n_inj, n_neu=p["n_neu"], n_t=n_t,
            t_cs_days=c["t_cs_days"], n_cs=c["n_cs"],
            cell_activation=p["cell_activation"])

    def train_config(self) -> TrainConfig:
        p = self.raw["proxy"]
        return TrainConfig(lr=p["lr"], lr_low=p["lr_low"], tol=p["tol"],
                           max_epochs=p["max_epochs"],
                           plateau_patience=p["plateau_patience"])

    def retrain_config(self) -> TrainConfig:
        p = self.raw["proxy"]
        return TrainConfig(lr=p["retrain_lr"], lr_low=p["retrain_lr"],
                           tol=p["tol"], max_epochs=p["retrain_max_epochs"],
                           plateau_patience=p["plateau_patience"])

    def pso_settings(self) -> PsoSettings:
        p = self.raw["pso"]
        return PsoSettings(p["n_particles"], p["n_iterations"], p["neighborhood"])

    def lm_settings(self) -> LmSettings:
        h = self.raw["hm"]
        return LmSettings(max_iterations=h["max_iterations"],
                          fd_step=h["fd_step"], rel_tol=h["rel_tol"],
                          max_rejects=h["max_rejects"])

    def numerics(self) -> SolverSettings:
        n = self.raw["numerics"]
        return SolverSettings(n["pressure_dt_days"], n["cfl"], n["sat_tol"],
                              n["max_halvings"], n["cg_rtol"], n["cg_maxiter"])

    def validate(self):
        clrm = self.raw["clrm"]
        controls = self.raw["controls"]
        n_r = clrm["n_realizations"]
        if round(0.1 * n_r) != 0.1 * n_r:
            raise ConfigError(f"0.1 * n_realizations must be integral, got {n_r}")
        if clrm["n_cycles"] > controls["n_cs"]:
            raise ConfigError("n_cycles cannot exceed the number of control steps")
        if clrm["truth_index"] >= clrm["n_truth_models"]:
            raise ConfigError("truth_index out of range")
        horizon = controls["t_cs_days"] * controls["n_cs"]
        if horizon % 30.0 != 0:
            raise ConfigError("control horizon must be a multiple of 30 days")
        well_names = [w["name"] for w in self.raw["wells"]]
        if len(set(well_names)) != len(well_names):
            raise ConfigError("well names must be unique")
        for c in self.raw["constraints"]:
            if c["scope"] != "field" and c["scope"] not in well_names:
                raise ConfigError(f"constraint scope {c['scope']!r} is not a well")
        self.grid()
        self.variogram()
        self.fluid()
        self.wells()
        self.proxy_config()


def load_config(path=None, profile=None, environ=None) -> RunConfig:
    """Resolve profile defaults <- TOML file <- environment overrides."""
    file_cfg = {}
    if path is not None:
        with open(path, "rb") as f:
            file_cfg = tomllib.load(f)
    name = profile or file_cfg.get("profile", "desk")
    base = profile_defaults(name)
    sources = {key: f"{name} default" for key in _flatten_keys(base)}
    file_cfg.pop("profile", None)
    if "wells" in file_cfg:  # list-of-tables replace wholesale
        base["wells"] = file_cfg.pop("wells")
        sources["wells"] = "user"
    if "constraints" in file_cfg:
        base["constraints"] = file_cfg.pop("constraints")
        sources["constraints"] = "user"
    _merge(base, file_cfg, sources=sources, origin="user")
    env = _env_overrides(environ if environ is not None else os.environ)
    if env:
        _merge(base, env, sources=sources, origin="env")
    cfg = RunConfig(base, sources)
    cfg.validate()
    return cfg


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value)} to TOML")


def dumps_toml(cfg: dict) -> str:
    """Minimal deterministic TOML emitter for the config schema."""
    lines = []
    tables = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, dict):
            tables.append((key, value))
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            tables.append((key, value))
        else:
            lines.append(f"{key} = {_toml_scalar(value)}")
    for key, value in tables:
        if isinstance(value, dict):
            lines.append(f"\n[{key}]")
            for k in sorted(value):
                lines.append(f"{k} = {_toml_scalar(value[k])}")
        else:
            for item in value:
                lines.append(f"\n[[{key}]]")
                for k in sorted(item):
                    lines.append(f"{k} = {_toml_scalar(item[k])}")
    return "\n".join(lines) + "\n"
