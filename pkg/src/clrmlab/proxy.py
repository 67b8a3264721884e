"""CNN-RNN well-rate proxy: assembly, datasets, training, and fast prediction.

The network maps a normalized log-permeability cube through three
conv/batchnorm/ReLU/maxpool stages to two dense heads that produce the
initial LSTM states; the LSTM then consumes the per-report-step normalized
BHP vector and a final dense layer emits one rate per output stream and step.
Output streams are ordered injector water, producer oil, producer water.
The training loss is the rate-mismatch metric evaluated in physical units
(sums from the day-0 row); the monitored error starts at the second row.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .geostat import Geomodel, load_geomodel, save_geomodel
from .seeds import stream as _rng_stream
from .resim import (
    REPORT_DT_DAYS,
    BhpSchedule,
    FluidSpec,
    RateSeries,
    SolverSettings,
    WellSpec,
    load_schedule_csv,
    simulate,
)

CHANNELS = (4, 8, 16)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class ProxyConfig:
    nx: int
    ny: int
    nz: int
    n_inj: int
    n_prod: int
    n_neu: int
    n_t: int
    t_cs_days: float
    n_cs: int
    cell_activation: str = "relu"

    def __post_init__(self):
        if self.n_neu < 1:
            raise ValueError("n_neu must be >= 1")
        if self.cell_activation not in ("relu", "tanh"):
            raise ValueError("cell_activation must be 'relu' or 'tanh'")

    @property
    def n_in(self) -> int:
        return self.n_inj + self.n_prod

    @property
    def n_out(self) -> int:
        return self.n_inj + 2 * self.n_prod

    @property
    def padded_dims(self) -> tuple:
        """CNN input extents: the grid padded up to multiples of 8 so the
        three halving pools stay exact. Grids already divisible by 8 are
        used as-is."""
        return tuple(-(-d // 8) * 8 for d in (self.nx, self.ny, self.nz))

    @property
    def flat_features(self) -> int:
        px, py, pz = self.padded_dims
        return (px // 8) * (py // 8) * (pz // 8) * CHANNELS[-1]


def parameter_count(cfg: ProxyConfig) -> int:
    """Closed-form trainable parameter count for the architecture table."""
    total = 0
    cin = 1
    for cout in CHANNELS:
        total += 27 * cin * cout + cout  # conv kernel + bias
        total += 2 * cout                # batchnorm gamma, beta
        cin = cout
    total += 2 * (cfg.flat_features * cfg.n_neu + cfg.n_neu)  # two state heads
    total += 4 * ((cfg.n_in + cfg.n_neu) * cfg.n_neu + cfg.n_neu)  # LSTM gates
    total += cfg.n_neu * cfg.n_out + cfg.n_out  # output layer
    return total


@dataclass
class NormStats:
    logk_mean: float = 0.0
    logk_sd: float = 1.0
    bhp_lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bhp_hi: np.ndarray = field(default_factory=lambda: np.ones(0))
    out_scale: np.ndarray = field(default_factory=lambda: np.ones(0))
    frozen: bool = False


@dataclass
class ProxyModel:
    config: ProxyConfig
    store: nn.ParamStore
    norm: NormStats
    inj_names: list
    prod_names: list


def build_proxy(cfg: ProxyConfig, seed: int, inj_names=None, prod_names=None) -> ProxyModel:
    """Wire the network and initialize parameters (Glorot-uniform weights,
    zero biases, unit batchnorm scale)."""
    rng = _rng_stream(seed, 0)
    store = nn.ParamStore()
    cin = 1
    for li, cout in enumerate(CHANNELS, start=1):
        fan_in, fan_out = 27 * cin, 27 * cout
        store.add_param(f"conv{li}.w",
                        nn.glorot_uniform(rng, (3, 3, 3, cin, cout), fan_in, fan_out))
        store.add_param(f"conv{li}.b", np.zeros(cout))
        store.add_param(f"bn{li}.gamma", np.ones(cout))
        store.add_param(f"bn{li}.beta", np.zeros(cout))
        store.add_buffer(f"bn{li}.mean", np.zeros(cout))
        store.add_buffer(f"bn{li}.var", np.ones(cout))
        cin = cout
    flat = cfg.flat_features
    for head in ("fc_c0", "fc_h0"):
        store.add_param(f"{head}.w",
                        nn.glorot_uniform(rng, (flat, cfg.n_neu), flat, cfg.n_neu))
        store.add_param(f"{head}.b", np.zeros(cfg.n_neu))
    for z in "fiog":
        store.add_param(f"lstm.w_x_{z}",
                        nn.glorot_uniform(rng, (cfg.n_in, cfg.n_neu), cfg.n_in, cfg.n_neu))
        store.add_param(f"lstm.w_h_{z}",
                        nn.glorot_uniform(rng, (cfg.n_neu, cfg.n_neu), cfg.n_neu, cfg.n_neu))
        store.add_param(f"lstm.b_{z}", np.zeros(cfg.n_neu))
    store.add_param("fc_out.w",
                    nn.glorot_uniform(rng, (cfg.n_neu, cfg.n_out), cfg.n_neu, cfg.n_out))
    store.add_param("fc_out.b", np.zeros(cfg.n_out))

    inj_names = inj_names or [f"I{i+1}" for i in range(cfg.n_inj)]
    prod_names = prod_names or [f"P{i+1}" for i in range(cfg.n_prod)]
    return ProxyModel(cfg, store, NormStats(), list(inj_names), list(prod_names))


# ---------------------------------------------------------------------------
# forward passes


def _normalize_cube(model: ProxyModel, gm: Geomodel) -> np.ndarray:
    z = (gm.cube() - model.norm.logk_mean) / model.norm.logk_sd
    px, py, pz = model.config.padded_dims
    if z.shape != (px, py, pz):
        padded = np.zeros((px, py, pz))  # zero = ensemble-mean level
        padded[:z.shape[0], :z.shape[1], :z.shape[2]] = z
        z = padded
    return z[..., None]


def _schedule_inputs(model: ProxyModel, schedule: BhpSchedule) -> np.ndarray:
    """(N_t, N_in) normalized BHPs; report step t reads the control step
    containing time 30*(t-1), with the final boundary on the last step."""
    cfg = model.config
    lo, hi = model.norm.bhp_lo, model.norm.bhp_hi
    x = np.empty((cfg.n_t, cfg.n_in))
    for t in range(cfg.n_t):
        step = min(int(t * REPORT_DT_DAYS // cfg.t_cs_days), cfg.n_cs - 1)
        x[t] = (schedule.bhp[:, step] - lo) / (hi - lo)
    return x


def _network_forward(model: ProxyModel, cubes: np.ndarray, sample_model_idx,
                     x_seq: np.ndarray, mode: str) -> nn.Tensor:
    """Full graph: (n_models, nx, ny, nz, 1) cubes + per-sample inputs ->
    network-scale outputs (B, N_t, N_out)."""
    cfg, store = model.config, model.store
    p = store.params
    buf = store.buffers
    # batchnorm train mode needs >= 2 rows; a singleton batch is duplicated,
    # which leaves its statistics unchanged (mean = x, var = 0)
    if mode == "train" and cubes.shape[0] == 1:
        cubes = np.repeat(cubes, 2, axis=0)
    t = nn.Tensor(cubes)
    for li in (1, 2, 3):
        t = nn.conv3d(t, p[f"conv{li}.w"], p[f"conv{li}.b"])
        t = nn.batchnorm(t, p[f"bn{li}.gamma"], p[f"bn{li}.beta"], mode,
                         buf[f"bn{li}.mean"], buf[f"bn{li}.var"])
        t = t.relu()
        t = nn.maxpool3d(t)
    flat = t.reshape(t.shape[0], cfg.flat_features)
    c0 = nn.dense(flat, p["fc_c0.w"], p["fc_c0.b"])
    h0 = nn.dense(flat, p["fc_h0.w"], p["fc_h0.b"])
    sample_model_idx = np.asarray(sample_model_idx, dtype=np.int64)
    h = h0.gather_rows(sample_model_idx)
    c = c0.gather_rows(sample_model_idx)
    lstm = {k.split(".", 1)[1]: v for k, v in p.items() if k.startswith("lstm.")}
    bsz = len(sample_model_idx)
    hs = []
    for step in range(cfg.n_t):
        x_t = nn.Tensor(x_seq[:, step, :])
        h, c = nn.lstm_step(x_t, h, c, lstm, cfg.cell_activation)
        hs.append(h)
    seq = nn.stack(hs, axis=1).reshape(bsz * cfg.n_t, cfg.n_neu)
    y = nn.dense(seq, p["fc_out.w"], p["fc_out.b"])
    return y.reshape(bsz, cfg.n_t, cfg.n_out)


def _report_times(cfg: ProxyConfig) -> np.ndarray:
    return np.arange(cfg.n_t) * REPORT_DT_DAYS


def _to_rate_series(model: ProxyModel, phys: np.ndarray) -> RateSeries:
    mat = np.maximum(phys, 0.0).T  # clamp negatives at reporting
    return RateSeries.from_streams(_report_times(model.config), model.inj_names,
                                   model.prod_names, mat)


def forward(model: ProxyModel, gm: Geomodel, schedule: BhpSchedule) -> RateSeries:
    """Predict the rate series for one geomodel and one schedule."""
    if (gm.grid.nx, gm.grid.ny, gm.grid.nz) != (model.config.nx, model.config.ny,
                                                model.config.nz):
        raise ValueError("geomodel grid does not match the proxy configuration")
    cubes = _normalize_cube(model, gm)[None]
    x_seq = _schedule_inputs(model, schedule)[None]
    y = _network_forward(model, cubes, [0], x_seq, "infer")
    phys = y.data[0] * model.norm.out_scale
    return _to_rate_series(model, phys)


class ProxyEvaluator:
    """Batched rate predictions over a fixed ensemble.

    The CNN half depends only on the geomodels, so the initial LSTM states
    are computed once per ensemble; each schedule evaluation runs the RNN
    half only.
    """

    def __init__(self, model: ProxyModel, geomodels: list[Geomodel]):
        self.model = model
        self.n_models = len(geomodels)
        cfg, store = model.config, model.store
        p, buf = store.params, store.buffers
        cubes = np.stack([_normalize_cube(model, g) for g in geomodels])
        t = nn.Tensor(cubes)
        for li in (1, 2, 3):
            t = nn.conv3d(t, p[f"conv{li}.w"], p[f"conv{li}.b"])
            t = nn.batchnorm(t, p[f"bn{li}.gamma"], p[f"bn{li}.beta"], "infer",
                             buf[f"bn{li}.mean"], buf[f"bn{li}.var"])
            t = t.relu()
            t = nn.maxpool3d(t)
        flat = t.reshape(self.n_models, cfg.flat_features)
        self._c0 = nn.dense(flat, p["fc_c0.w"], p["fc_c0.b"]).data
        self._h0 = nn.dense(flat, p["fc_h0.w"], p["fc_h0.b"]).data
        self._lstm = {k.split(".", 1)[1]: nn.Tensor(v.data)
                      for k, v in p.items() if k.startswith("lstm.")}
        self._w_out = p["fc_out.w"].data
        self._b_out = p["fc_out.b"].data

    def rates(self, schedule: BhpSchedule) -> list[RateSeries]:
        """Predicted RateSeries for every ensemble member under one schedule."""
        cfg = self.model.config
        x_row = _schedule_inputs(self.model, schedule)
        h = nn.Tensor(self._h0)
        c = nn.Tensor(self._c0)
        out = np.empty((self.n_models, cfg.n_t, cfg.n_out))
        for step in range(cfg.n_t):
            x_t = nn.Tensor(np.broadcast_to(x_row[step], (self.n_models, cfg.n_in)))
            h, c = nn.lstm_step(x_t, h, c, self._lstm, cfg.cell_activation)
            out[:, step, :] = h.data @ self._w_out + self._b_out
        phys = out * self.model.norm.out_scale
        return [_to_rate_series(self.model, phys[i]) for i in range(self.n_models)]


class SimulatorEvaluator:
    """Same interface as ProxyEvaluator, backed by the full simulator.

    Counts simulator calls so users can charge them to a ledger line.
    """

    def __init__(self, geomodels, fluid: FluidSpec, wells: list[WellSpec],
                 numerics: SolverSettings = SolverSettings(), threads: int = 1):
        self.geomodels = list(geomodels)
        self.fluid = fluid
        self.wells = wells
        self.numerics = numerics
        self.threads = threads
        self.calls = 0

    def rates(self, schedule: BhpSchedule) -> list[RateSeries]:
        out = parallel_map(
            lambda g: simulate(g, self.fluid, self.wells, schedule, self.numerics),
            self.geomodels, self.threads)
        self.calls += len(self.geomodels)
        return out


def parallel_map(fn, items, threads: int = 1) -> list:
    """Order-preserving map; results are independent of the thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# error metric


@dataclass(frozen=True)
class ErrorConfig:
    """Per-stream softening constants for the rate-mismatch metric (m3/day).
    Only producer water needs one (rates are zero before breakthrough)."""

    alpha_prod_water: float = 20.0
    alpha_prod_oil: float = 0.0
    alpha_inj_water: float = 0.0

    def stream_alphas(self, n_inj: int, n_prod: int) -> np.ndarray:
        return np.concatenate([
            np.full(n_inj, self.alpha_inj_water),
            np.full(n_prod, self.alpha_prod_oil),
            np.full(n_prod, self.alpha_prod_water),
        ])


def sample_error(sim: RateSeries, prox: RateSeries, ec: ErrorConfig,
                 start_t: int = 2) -> float:
    """Time-averaged relative rate mismatch, averaged over streams.

    start_t is the 1-based first report row included: 1 for the training
    loss, 2 for the monitored error. Each stream contributes the mean over
    included rows of |sim - prox| / (sim + alpha); a value of 0.05 therefore
    means 5% softened relative error per row on average.
    """
    a, b = sim.streams(), prox.streams()
    if a.shape != b.shape:
        raise ValueError(f"rate series shapes differ: {a.shape} vs {b.shape}")
    alphas = ec.stream_alphas(len(sim.inj_names), len(sim.prod_names))
    col = start_t - 1
    terms = np.abs(a[:, col:] - b[:, col:]) / (a[:, col:] + alphas[:, None])
    return float(terms.mean())


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    models: list[Geomodel]
    wells: list[WellSpec]
    schedules: list[BhpSchedule]   # one per sample, model-major order
    targets: list[RateSeries]
    model_index: np.ndarray        # (n_samples,)
    n_b_train: int
    n_b_test: int
    seed: int
    fixed_prefix_steps: int = 0

    @property
    def n_b(self) -> int:
        return self.n_b_train + self.n_b_test

    @property
    def train_idx(self) -> np.ndarray:
        j = np.arange(len(self.schedules)) % self.n_b
        return np.nonzero(j < self.n_b_train)[0]

    @property
    def test_idx(self) -> np.ndarray:
        j = np.arange(len(self.schedules)) % self.n_b
        return np.nonzero(j >= self.n_b_train)[0]


def random_schedule(bounds, t_cs_days: float, n_cs: int, rng,
                    fixed_prefix: np.ndarray | None = None) -> BhpSchedule:
    """Uniform BHP draw per well per control step; prefix columns (already
    operated) are copied verbatim."""
    bounds = np.asarray(bounds, dtype=np.float64)
    lo, hi = bounds[:, 0], bounds[:, 1]
    bhp = lo[:, None] + rng.random((len(lo), n_cs)) * (hi - lo)[:, None]
    if fixed_prefix is not None and fixed_prefix.shape[1]:
        bhp[:, :fixed_prefix.shape[1]] = fixed_prefix
    return BhpSchedule(t_cs_days, bhp, bounds)


def make_dataset(models, wells, fluid: FluidSpec, bounds, t_cs_days: float,
                 n_cs: int, n_b_train: int, n_b_test: int, seed: int,
                 fixed_prefix: np.ndarray | None = None,
                 numerics: SolverSettings = SolverSettings(),
                 threads: int = 1) -> Dataset:
    """Draw schedules, run the simulator once per (model, schedule) pair, and
    split per model into train/test groups. Schedule (i, j) uses the RNG
    stream seeded by (seed, i, j), so the draw is reproducible sample-wise."""
    n_b = n_b_train + n_b_test
    jobs = []
    model_index = []
    for i, gm in enumerate(models):
        for j in range(n_b):
            rng = _rng_stream(seed, i, j)
            sched = random_schedule(bounds, t_cs_days, n_cs, rng, fixed_prefix)
            jobs.append((i, gm, sched))
            model_index.append(i)

    def run(job):
        i, gm, sched = job
        try:
            return simulate(gm, fluid, wells, sched, numerics)
        except Exception as exc:
            raise RuntimeError(f"simulation failed for model {i}: {exc}") from exc

    targets = parallel_map(run, jobs, threads)
    return Dataset(
        models=list(models), wells=list(wells),
        schedules=[j[2] for j in jobs], targets=targets,
        model_index=np.asarray(model_index), n_b_train=n_b_train,
        n_b_test=n_b_test, seed=seed,
        fixed_prefix_steps=0 if fixed_prefix is None else fixed_prefix.shape[1],
    )


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_low: float = 1e-4
    tol: float = 0.05
    max_epochs: int = 20000
    divergence_factor: float = 10.0
    error_config: ErrorConfig = field(default_factory=ErrorConfig)
    # optional plateau decay below lr_low; the Adam/L1 noise floor scales with
    # the learning rate, and desk-scale rate magnitudes need a smaller floor
    # than the default two-phase schedule provides
    plateau_patience: int = 0  # 0 disables
    plateau_factor: float = 0.5
    lr_min: float = 1e-6


RETRAIN_DEFAULTS = TrainConfig(lr=1e-4, lr_low=1e-4)


def fit_normalization(model: ProxyModel, ds: Dataset):
    """Freeze input/output scalings from the training split."""
    if model.norm.frozen:
        return
    logk = np.concatenate([g.logk for g in ds.models])
    bounds = ds.schedules[0].bounds
    train_targets = [ds.targets[i].streams() for i in ds.train_idx]
    scale = np.max(np.abs(np.stack(train_targets)), axis=(0, 2))
    model.norm = NormStats(
        logk_mean=float(logk.mean()),
        logk_sd=max(float(logk.std()), 1e-12),
        bhp_lo=bounds[:, 0].copy(),
        bhp_hi=bounds[:, 1].copy(),
        out_scale=np.maximum(scale, 1.0),
        frozen=True,
    )


def _prepare_batch(model: ProxyModel, ds: Dataset, idx: np.ndarray):
    cubes = np.stack([_normalize_cube(model, g) for g in ds.models])
    x_seq = np.stack([_schedule_inputs(model, ds.schedules[i]) for i in idx])
    targets = np.stack([ds.targets[i].streams().T for i in idx])  # (B, N_t, S)
    model_idx = ds.model_index[idx]
    return cubes, model_idx, x_seq, targets


def _loss_and_metrics(model: ProxyModel, cubes, model_idx, x_seq, targets,
                      alphas, mode: str):
    y = _network_forward(model, cubes, model_idx, x_seq, mode)
    y_phys = y * nn.Tensor(model.norm.out_scale)
    weights = 1.0 / (targets + alphas)
    bsz, n_t, n_out = targets.shape
    diff = (y_phys - nn.Tensor(targets)).abs()
    loss = (diff * nn.Tensor(weights)).sum() * (1.0 / (bsz * n_out * n_t))
    e_train = float((np.abs(y_phys.data - targets)[:, 1:, :]
                     * weights[:, 1:, :]).sum() / (bsz * n_out * (n_t - 1)))
    return loss, e_train


def train(model: ProxyModel, ds: Dataset, hyper: TrainConfig = TrainConfig(),
          warm_start: bool = False):
    """Full-batch Adam on the physical-units mismatch loss.

    Stops when the monitored training error drops below hyper.tol or at the
    epoch cap; the learning rate falls to hyper.lr_low once the error is
    within twice the tolerance. Returns (model, history) with history rows
    (epoch, loss, e_train, e_test, lr).
    """
    if not len(ds.train_idx):
        raise ValueError("training split is empty")
    if not warm_start:
        fit_normalization(model, ds)
    elif not model.norm.frozen:
        raise ValueError("retraining requires a previously trained model")

    cfg = model.config
    alphas = hyper.error_config.stream_alphas(cfg.n_inj, cfg.n_prod)
    cubes, tr_model_idx, tr_x, tr_t = _prepare_batch(model, ds, ds.train_idx)
    has_test = len(ds.test_idx) > 0
    if has_test:
        _, te_model_idx, te_x, te_t = _prepare_batch(model, ds, ds.test_idx)
        te_weights = 1.0 / (te_t + alphas)

    adam = nn.AdamState(lr=hyper.lr)
    history = []
    loss0 = None
    best_e = math.inf
    best_params = None
    since_best = 0
    for epoch in range(1, hyper.max_epochs + 1):
        loss, e_train = _loss_and_metrics(model, cubes, tr_model_idx, tr_x, tr_t,
                                          alphas, "train")
        lvalue = float(loss.data)
        if not math.isfinite(lvalue):
            raise TrainingDivergedError(epoch, "non-finite loss")
        if loss0 is None:
            loss0 = lvalue
        if lvalue > hyper.divergence_factor * loss0:
            raise TrainingDivergedError(
                epoch, f"loss {lvalue:.3g} exceeded {hyper.divergence_factor}x "
                       f"its initial value {loss0:.3g}")
        if has_test:
            y_te = _network_forward(model, cubes, te_model_idx, te_x, "infer")
            phys = np.maximum(y_te.data * model.norm.out_scale, 0.0)
            diff = np.abs(phys - te_t)
            e_test = float((diff[:, 1:, :] * te_weights[:, 1:, :]).mean())
        else:
            e_test = math.nan
        history.append((epoch, lvalue, e_train, e_test, adam.lr))
        if e_train < best_e:
            best_e = e_train
            since_best = 0
            best_params = {k: v.data.copy() for k, v in model.store.params.items()}
        else:
            since_best += 1
        if e_train < hyper.tol:
            break
        if e_train < 2.0 * hyper.tol:
            adam.lr = min(adam.lr, hyper.lr_low)
        if (hyper.plateau_patience and since_best >= hyper.plateau_patience
                and adam.lr > hyper.lr_min):
            adam.lr = max(adam.lr * hyper.plateau_factor, hyper.lr_min)
            since_best = 0
        model.store.zero_grad()
        loss.backward()
        nn.adam_update(adam, model.store.params, model.store.flat_grads())
    if best_params is not None and best_e < history[-1][2]:
        for k, v in model.store.params.items():
            v.data[:] = best_params[k]
    return model, history


def retrain(model: ProxyModel, ds_new: Dataset,
            hyper: TrainConfig = RETRAIN_DEFAULTS):
    """Warm-start continuation on a new dataset with the retraining rates."""
    return train(model, ds_new, hyper, warm_start=True)


def ensemble_error(model: ProxyModel, ds: Dataset, which: str = "test",
                   ec: ErrorConfig = ErrorConfig()) -> float:
    """Mean per-sample error over a split."""
    errs = per_sample_errors(model, ds, which, ec)
    if not len(errs):
        raise ValueError(f"split {which!r} is empty")
    return float(errs.mean())


def per_sample_errors(model: ProxyModel, ds: Dataset, which: str = "test",
                      ec: ErrorConfig = ErrorConfig()) -> np.ndarray:
    idx = ds.train_idx if which == "train" else ds.test_idx
    if not len(idx):
        return np.empty(0)
    cubes, model_idx, x_seq, targets = _prepare_batch(model, ds, idx)
    y = _network_forward(model, cubes, model_idx, x_seq, "infer")
    phys = np.maximum(y.data * model.norm.out_scale, 0.0)  # reported rates
    alphas = ec.stream_alphas(model.config.n_inj, model.config.n_prod)
    terms = np.abs(phys - targets)[:, 1:, :] / (targets[:, 1:, :] + alphas)
    return terms.mean(axis=(1, 2))


# ---------------------------------------------------------------------------
# persistence


def save_proxy(path, model: ProxyModel):
    cfg = model.config
    extras = {
        "config": {k: getattr(cfg, k) for k in
                   ("nx", "ny", "nz", "n_inj", "n_prod", "n_neu", "n_t",
                    "t_cs_days", "n_cs", "cell_activation")},
        "norm": {
            "logk_mean": model.norm.logk_mean,
            "logk_sd": model.norm.logk_sd,
            "bhp_lo": model.norm.bhp_lo.tolist(),
            "bhp_hi": model.norm.bhp_hi.tolist(),
            "out_scale": model.norm.out_scale.tolist(),
            "frozen": model.norm.frozen,
        },
        "inj_names": model.inj_names,
        "prod_names": model.prod_names,
    }
    nn.save_params(path, model.store, extras)


def load_proxy(path) -> ProxyModel:
    store, extras = nn.load_params(path)
    cfg = ProxyConfig(**extras["config"])
    norm_raw = extras["norm"]
    norm = NormStats(
        logk_mean=norm_raw["logk_mean"],
        logk_sd=norm_raw["logk_sd"],
        bhp_lo=np.asarray(norm_raw["bhp_lo"]),
        bhp_hi=np.asarray(norm_raw["bhp_hi"]),
        out_scale=np.asarray(norm_raw["out_scale"]),
        frozen=norm_raw["frozen"],
    )
    return ProxyModel(cfg, store, norm, extras["inj_names"], extras["prod_names"])


def save_dataset(path, ds: Dataset):
    """Dataset directory: manifest.json plus one schedule CSV, one rate CSV
    and one geomodel binary per sample/model."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    well_names = [w.name for w in ds.wells]
    manifest = {
        "seed": ds.seed,
        "n_models": len(ds.models),
        "n_b_train": ds.n_b_train,
        "n_b_test": ds.n_b_test,
        "fixed_prefix_steps": ds.fixed_prefix_steps,
        "t_cs_days": ds.schedules[0].t_cs_days,
        "bounds": ds.schedules[0].bounds.tolist(),
        "wells": [{"name": w.name, "kind": w.kind, "i": w.i, "j": w.j,
                   "layers": list(w.layers), "r_w": w.r_w} for w in ds.wells],
        "model_index": ds.model_index.tolist(),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for i, gm in enumerate(ds.models):
        save_geomodel(path / f"model_{i:03d}.bin", gm)
    for s, (sched, rates) in enumerate(zip(ds.schedules, ds.targets)):
        sched.save_csv(path / f"sample_{s:04d}_schedule.csv", well_names)
        rates.save_csv(path / f"sample_{s:04d}_rates.csv")


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    wells = [WellSpec(w["name"], w["kind"], w["i"], w["j"], tuple(w["layers"]),
                      w["r_w"]) for w in manifest["wells"]]
    well_names = [w.name for w in wells]
    models = [load_geomodel(path / f"model_{i:03d}.bin")
              for i in range(manifest["n_models"])]
    n_samples = len(manifest["model_index"])
    schedules, targets = [], []
    for s in range(n_samples):
        schedules.append(load_schedule_csv(
            path / f"sample_{s:04d}_schedule.csv", well_names,
            manifest["t_cs_days"], np.asarray(manifest["bounds"])))
        targets.append(RateSeries.load_csv(path / f"sample_{s:04d}_rates.csv"))
    return Dataset(
        models=models, wells=wells, schedules=schedules, targets=targets,
        model_index=np.asarray(manifest["model_index"]),
        n_b_train=manifest["n_b_train"], n_b_test=manifest["n_b_test"],
        seed=manifest["seed"], fixed_prefix_steps=manifest["fixed_prefix_steps"],
    )
