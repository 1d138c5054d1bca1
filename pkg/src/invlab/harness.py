"""Round-trip reconstruction experiments, efficiency sweeps and their reports."""

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analysis import StatsConfig, run_error_stats
from .config import ErrorSpec, ExperimentConfig, config_from_dict
from .dynamics import ddim_denoise
from .errors import ConfigError, InvlabError, ShapeMismatch
from .inversion import invert, parse_method
from .models import ErrorModel, GaussianMixtureModel, GaussianPredictor, GMMPredictor, PerturbedPredictor
from .schedule import build_schedule, make_grid

CSV_COLUMNS = ("method", "seed", "dim", "steps", "nfe", "mse", "psnr", "wall_ms")
PSNR_CAP = 300.0
DEFAULT_ROUNDTRIP_METHODS = ("ddim", "ife")
SEED_MOD = 2**64


def mse(a, b):
    """Mean of squared differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {a.shape} != {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak):
    """``10 log10(peak^2 / mse)`` in dB; an exact match reports the 300 dB cap."""
    m = mse(a, b)
    if m == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / m))


def worker_count():
    """Worker pool size from ``INVLAB_THREADS`` (default 1)."""
    raw = os.environ.get("INVLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"INVLAB_THREADS must be an integer, got {raw!r}") from None


def as_config(config):
    if isinstance(config, ExperimentConfig):
        return config
    if isinstance(config, dict):
        return config_from_dict(config)
    raise TypeError(f"expected ExperimentConfig or dict, got {type(config).__name__}")


# --------------------------------------------------------------------------
# problem instances
# --------------------------------------------------------------------------

@dataclass
class Instance:
    """One seeded trial: data sample, predictor factory and PSNR peak."""

    seed: int
    z0: np.ndarray
    peak: float
    make_predictor: object


def trial_seed(config, trial):
    return (config.seed + trial) % SEED_MOD


def make_instance(config, schedule, grid, trial):
    """Build the data and predictor for ``trial``; every method sees the same instance."""
    seed = trial_seed(config, trial)
    rng = np.random.default_rng([seed, 1])
    spec = config.model
    if spec.kind == "gaussian":
        peak = 6.0 * math.sqrt(spec.variance)
        z0 = math.sqrt(spec.variance) * rng.standard_normal(config.dim)

        def base():
            return GaussianPredictor(schedule, spec.variance)
    else:
        if spec.file:
            gmm = GaussianMixtureModel.load(spec.file)
            if gmm.dim != config.dim:
                raise ConfigError(f"mixture file has dim {gmm.dim}, config says {config.dim}", "dim")
        else:
            gmm = GaussianMixtureModel.random(rng, config.dim, spec.K, spec.mean_scale, tuple(spec.var_range))
        peak = 6.0 * gmm.coordinate_std()
        z0 = gmm.sample(rng)

        def base():
            return GMMPredictor(schedule, gmm)

    if config.error is None:
        factory = base
    else:
        err = ErrorModel(config.error.gamma, config.error.rho, seed)

        def factory():
            return PerturbedPredictor(base(), err, grid, trial=0, dim=config.dim)
    return Instance(seed, z0, peak, factory)


# --------------------------------------------------------------------------
# round trip
# --------------------------------------------------------------------------

@dataclass
class TrialResult:
    method: str
    trial: int
    seed: int
    dim: int
    steps: int
    nfe: int
    mse: float
    psnr: float
    wall_ms: float
    deviation: np.ndarray = None
    error: str = None

    def csv_row(self):
        return [self.method, self.seed, self.dim, self.steps, self.nfe,
                repr(self.mse), repr(self.psnr), f"{self.wall_ms:.3f}"]


@dataclass
class MetricsReport:
    methods: list
    trials: int
    results: list = field(default_factory=list)

    @property
    def failures(self):
        return [r for r in self.results if r.error is not None]

    def for_method(self, method):
        return [r for r in self.results if r.method == method]

    def column(self, method, name):
        return np.array([getattr(r, name) for r in self.for_method(method)], dtype=np.float64)

    def summary(self):
        out = {}
        for m in self.methods:
            rows = [r for r in self.for_method(m) if r.error is None]
            if not rows:
                out[m] = {"ok": 0}
                continue
            mses = np.array([r.mse for r in rows])
            ps = np.array([r.psnr for r in rows])
            nfes = np.array([r.nfe for r in rows])
            walls = np.array([r.wall_ms for r in rows])
            out[m] = {
                "ok": len(rows),
                "mse_mean": float(mses.mean()), "mse_std": float(mses.std(ddof=1)) if len(rows) > 1 else 0.0,
                "psnr_mean": float(ps.mean()), "psnr_std": float(ps.std(ddof=1)) if len(rows) > 1 else 0.0,
                "nfe_mean": float(nfes.mean()),
                "wall_ms_mean": float(walls.mean()),
                "deviation_mean": np.mean([r.deviation for r in rows], axis=0).tolist(),
            }
        return out


def _roundtrip_one(config, schedule, grid, method, trial):
    inst = make_instance(config, schedule, grid, trial)
    label = parse_method(method).label
    pred = inst.make_predictor()
    try:
        start_nfe = pred.nfe
        t0 = time.perf_counter()
        traj = invert(method, pred, schedule, grid, inst.z0)
        wall = (time.perf_counter() - t0) * 1e3
        used = pred.nfe - start_nfe
        if traj.nfe != used:
            raise AssertionError(f"{label}: trajectory reports {traj.nfe} NFE, predictor counted {used}")
        back = ddim_denoise(inst.make_predictor(), schedule, grid, traj.zN)
    except InvlabError as exc:
        return TrialResult(label, trial, inst.seed, config.dim, grid.N, pred.nfe,
                           math.nan, math.nan, math.nan, None, f"{type(exc).__name__}: {exc}")
    dev = np.sqrt(np.mean((traj.latents - back.latents) ** 2, axis=1))
    return TrialResult(label, trial, inst.seed, config.dim, grid.N, used,
                       mse(back.z0, inst.z0), psnr(back.z0, inst.z0, inst.peak), wall, dev)


def _run_methods(config, methods):
    schedule = build_schedule(config.schedule.kind, config.schedule.T, config.schedule.params)
    grid = make_grid(schedule, config.grid.N, config.grid.offset)
    jobs = [(m, t) for m in methods for t in range(config.trials)]
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda job: _roundtrip_one(config, schedule, grid, *job), jobs))
    else:
        results = [_roundtrip_one(config, schedule, grid, m, t) for m, t in jobs]
    return grid, results


def run_roundtrip(config):
    """Invert each trial's data with every method, denoise back and score the reconstruction."""
    config = as_config(config)
    methods = list(config.methods or DEFAULT_ROUNDTRIP_METHODS)
    if not methods:
        raise ConfigError("empty method list", "methods")
    labels = [parse_method(m).label for m in methods]
    _, results = _run_methods(config, methods)
    return MetricsReport(labels, config.trials, results)


def trace_trial(config, method, trial=0):
    """Inversion trajectory of one trial, for dumping."""
    config = as_config(config)
    schedule = build_schedule(config.schedule.kind, config.schedule.T, config.schedule.params)
    grid = make_grid(schedule, config.grid.N, config.grid.offset)
    inst = make_instance(config, schedule, grid, trial)
    return invert(method, inst.make_predictor(), schedule, grid, inst.z0)


def emit_csv(report, path):
    """Write one row per (method, trial) with columns :data:`CSV_COLUMNS`."""
    rows = sorted(report.results, key=lambda r: (report.methods.index(r.method), r.trial))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_row())


# --------------------------------------------------------------------------
# efficiency sweep
# --------------------------------------------------------------------------

BENCH_COLUMNS = ("method", "extra_iters", "nfe_per_step", "nfe", "budget", "mse_mean", "mse_std",
                 "psnr_mean", "ife_wins")


@dataclass
class BenchTable:
    """Aggregate row per method plus the per-trial report it came from."""

    rows: list
    report: MetricsReport

    def row(self, method):
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def bench_methods(config):
    if config.methods is not None:
        return list(config.methods)
    return ["ife"] + [f"fp:k={k}" for k in config.extra_iters]


def run_bench(config):
    """IFE against fixed-point inversion with 0..4 extra iterations per step.

    Each row records the per-step NFE budget (1 for single-evaluation methods,
    ``1 + k`` for the fixed-point baseline) and the fraction of trials on
    which IFE's reconstruction MSE is no worse than the row's. Methods without
    early stopping must spend exactly their budget on every trial; the
    predictor counters are checked against it.
    """
    config = as_config(config)
    methods = bench_methods(config)
    if not methods:
        raise ConfigError("empty method list", "methods")
    report = run_roundtrip(ExperimentConfig(**{**config.__dict__, "methods": methods}))
    N = config.grid.N
    ife_mse = report.column("ife", "mse") if "ife" in report.methods else None
    rows = []
    for label in report.methods:
        m = parse_method(label)
        per_step = 1 + m.extra_iters if m.name == "fixed-point" else 1
        nfe = report.column(label, "nfe")
        mses = report.column(label, "mse")
        ok = np.isfinite(mses)
        budget = N * per_step if m.name != "oracle" else None
        if budget is not None and m.tol is None and np.any(nfe[ok] != budget):
            raise AssertionError(f"{label}: predictor ledger shows {sorted(set(nfe[ok].astype(int)))} "
                                 f"evaluations, budget is {budget}")
        rows.append({
            "method": label,
            "extra_iters": m.extra_iters if m.name == "fixed-point" else 0,
            "nfe_per_step": float(nfe.mean()) / N,
            "nfe": int(nfe.max()),
            "budget": budget,
            "mse_mean": float(mses[ok].mean()) if ok.any() else math.nan,
            "mse_std": float(mses[ok].std(ddof=1)) if ok.sum() > 1 else 0.0,
            "psnr_mean": float(report.column(label, "psnr")[ok].mean()) if ok.any() else math.nan,
            "ife_wins": float(np.mean(ife_mse <= mses)) if ife_mse is not None else math.nan,
        })
    return BenchTable(rows, report)


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

def stats_config(config):
    config = as_config(config)
    err = config.error or ErrorSpec()
    return StatsConfig(
        trials=config.trials, dim=config.dim, N=config.grid.N, offset=config.grid.offset,
        gamma=err.gamma, rho=err.rho, seed=config.seed, bins=config.stats.bins,
        estimators=tuple(config.stats.estimators), schedule_kind=config.schedule.kind,
        schedule_T=config.schedule.T, schedule_params=config.schedule.params,
        workers=worker_count(),
    )


def run_stats(config):
    return run_error_stats(stats_config(config))
