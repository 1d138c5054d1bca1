"""Estimation-error statistics for the fixed-point estimators.

Under injected data-prediction errors the ground-truth fixed point of every
step is known in closed form, so each estimator's error can be sampled
exactly and compared with its theoretical mean and variance.
"""

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import kernels
from .errors import ConfigError, ShapeMismatch
from .models import ErrorModel
from .schedule import build_schedule, coefficient_table, make_grid, step_coefficients

ESTIMATORS = ("ddim-prev", "ife", "no-approx")


@dataclass(frozen=True)
class EstimationError:
    delta: np.ndarray
    step_index: int
    estimator: str


def estimation_error(z_true, z_est):
    """``z_true - z_est``."""
    if np.shape(z_true) != np.shape(z_est):
        raise ShapeMismatch(f"shape {np.shape(z_true)} != {np.shape(z_est)}")
    return np.asarray(z_true, dtype=np.float64) - np.asarray(z_est, dtype=np.float64)


def ddim_bias_mean(schedule, grid, i, z_prev, z0):
    """Mean of the error made by taking ``z_{t_{i-1}}`` as the step-i fixed point."""
    k = step_coefficients(schedule, grid, i, check=False)
    return (k.r - 1.0) * np.asarray(z_prev) + k.eta * k.s * np.asarray(z0)


def theory_variance(estimator, eta, abar, gamma_i, gamma_prev=0.0, rho=0.0):
    """Per-coordinate variance of the IFE (``"ife"``) or error-free (``"no-approx"``) estimate."""
    if estimator == "ife":
        return eta**2 * abar * (gamma_i + gamma_prev - 2.0 * rho * math.sqrt(gamma_i * gamma_prev))
    if estimator == "no-approx":
        return eta**2 * abar * gamma_i
    raise ValueError(f"no closed-form variance for estimator {estimator!r}")


# --------------------------------------------------------------------------
# histograms
# --------------------------------------------------------------------------

@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def mean(self):
        """Mean of the binned distribution (bin centres weighted by counts)."""
        return float(self.centers @ self.counts / self.counts.sum())

    def rows(self):
        return [(float(self.edges[j]), float(self.edges[j + 1]), int(self.counts[j]))
                for j in range(self.counts.size)]

    def to_dict(self):
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist()}

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "count"])
            for left, right, count in self.rows():
                w.writerow([repr(left), repr(right), count])


def histogram(samples, bins=50, range=None):
    """Equal-width histogram over ``range`` (default: sample min..max)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot histogram an empty sample")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts, edges = np.histogram(x, bins=bins, range=range)
    return Histogram(edges, counts)


# --------------------------------------------------------------------------
# mergeable moments
# --------------------------------------------------------------------------

class Moments:
    """Running count/mean/M2 over axis 0, mergeable across chunks (Chan et al.)."""

    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    @classmethod
    def of(cls, x):
        x = np.asarray(x, dtype=np.float64)
        m = cls(x.shape[1:])
        m.n = x.shape[0]
        m.mean = x.mean(axis=0)
        m.m2 = ((x - m.mean) ** 2).sum(axis=0)
        return m

    def merge(self, other):
        out = Moments(self.mean.shape)
        n = self.n + other.n
        if n == 0:
            return out
        d = other.mean - self.mean
        out.n = n
        out.mean = self.mean + d * (other.n / n)
        out.m2 = self.m2 + other.m2 + d**2 * (self.n * other.n / n)
        return out

    @property
    def var(self):
        """Unbiased (n - 1) sample variance."""
        return self.m2 / (self.n - 1)


# --------------------------------------------------------------------------
# experiment
# --------------------------------------------------------------------------

@dataclass
class StatsConfig:
    trials: int = 10_000
    dim: int = 8
    N: int = 20
    offset: int = 1
    gamma: object = 0.01
    rho: float = 0.0
    seed: int = 0
    bins: int = 50
    estimators: tuple = ESTIMATORS
    schedule_kind: str = "scaled-linear-beta"
    schedule_T: int = 1000
    schedule_params: dict = None
    z0_scale: float = 1.0
    chunk: int = 2048
    workers: int = 1

    def validate(self):
        if self.trials < 2:
            raise ConfigError("need at least 2 trials for sample variances", "trials")
        if self.dim < 1:
            raise ConfigError("must be >= 1", "dim")
        if not self.estimators:
            raise ConfigError("empty estimator list", "estimators")
        for name in self.estimators:
            if name not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {name!r}", "estimators")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("must lie in [0, 1]", "rho")
        if np.any(np.asarray(self.gamma) < 0):
            raise ConfigError("must be non-negative", "gamma")
        if self.bins < 1:
            raise ConfigError("must be >= 1", "bins")


@dataclass
class EstimatorStats:
    """Moments of one estimator's error; step arrays are indexed by step - 1."""

    name: str
    mean: np.ndarray            # (N, dim) sample mean per step and coordinate
    var: np.ndarray             # (N, dim) unbiased sample variance per step and coordinate
    var_pooled: np.ndarray      # (N,) variance pooled over coordinates
    mse: np.ndarray             # (N,) mean square about zero
    trial_mean: np.ndarray      # (trials, dim) per-trial error averaged over steps
    theory_mean: np.ndarray     # (N, dim)
    theory_var: np.ndarray      # (N,)
    sample_means: np.ndarray    # (trials, N) mean over coordinates of each error vector
    sample_vars: np.ndarray     # (trials, N) variance over coordinates of each error vector
    sample_mse: np.ndarray      # (trials, N) mean square of each error vector
    hist_mean: Histogram = None
    hist_var: Histogram = None
    hist_mse: Histogram = None
    hist_values: list = field(default_factory=list)

    def standard_error(self, n):
        return np.sqrt(self.var / n)

    def mean_z_scores(self):
        """z-statistics of the per-coordinate mean of the step-averaged error against its theory."""
        n = self.trial_mean.shape[0]
        ref = self.theory_mean.mean(axis=0)
        sd = self.trial_mean.std(axis=0, ddof=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (self.trial_mean.mean(axis=0) - ref) / (sd / math.sqrt(n))
        return np.where(sd > 0, z, 0.0)

    def mean_p_values(self):
        return 2.0 * stats.norm.sf(np.abs(self.mean_z_scores()))


@dataclass
class StatsReport:
    config: StatsConfig
    grid: np.ndarray
    z0: np.ndarray
    estimators: dict

    def variance_ratio(self, num="ife", den="no-approx", first_step=2):
        """Pooled variance ratio per step from ``first_step`` on."""
        a = self.estimators[num].var_pooled[first_step - 1:]
        b = self.estimators[den].var_pooled[first_step - 1:]
        return a / b

    def to_dict(self):
        cfg = asdict(self.config)
        cfg["gamma"] = np.asarray(self.config.gamma).tolist()
        cfg["estimators"] = list(self.config.estimators)
        out = {"config": cfg, "grid": self.grid.tolist(), "z0": self.z0.tolist(),
               "trials": self.config.trials, "estimators": {}}
        for name, st in self.estimators.items():
            out["estimators"][name] = {
                "mean": st.mean.tolist(),
                "var": st.var.tolist(),
                "var_pooled": st.var_pooled.tolist(),
                "mse": st.mse.tolist(),
                "theory_mean": st.theory_mean.tolist(),
                "theory_var": st.theory_var.tolist(),
                "pooled": {
                    "mean": float(st.mean.mean()),
                    "var": float(st.var_pooled.mean()),
                    "mse": float(st.mse.mean()),
                },
                "hist_mean": st.hist_mean.to_dict(),
                "hist_var": st.hist_var.to_dict(),
                "hist_mse": st.hist_mse.to_dict(),
                "hist_values": [h.to_dict() for h in st.hist_values],
            }
        return out

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    def write_histograms(self, prefix):
        """One CSV per estimator and panel: ``<prefix>_<estimator>_{mean,var,mse}.csv``."""
        paths = []
        for name, st in self.estimators.items():
            for panel, h in (("mean", st.hist_mean), ("var", st.hist_var), ("mse", st.hist_mse)):
                p = f"{prefix}_{name}_{panel}.csv"
                h.write_csv(p)
                paths.append(p)
        return paths


def _error_covariance(gamma, rho, n):
    g = np.sqrt(gamma)
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    return np.outer(g, g) * rho ** lag


def _ddim_theory(r, c, z0, cov):
    """Exact mean and variance of the DDIM shortcut error, marginalised over earlier errors."""
    S = r.size
    mean_chain = np.zeros((S, z0.size))
    mean_chain[0] = z0
    A = np.zeros((S, S))            # z_j = mean_j + sum_k A[j, k] e_k
    for j in range(1, S):
        mean_chain[j] = r[j] * mean_chain[j - 1] + c[j] * z0
        A[j] = r[j] * A[j - 1]
        A[j, j] = c[j]
    means, variances = [], []
    for i in range(1, S):
        w = (r[i] - 1.0) * A[i - 1]
        w[i] += c[i]
        means.append((r[i] - 1.0) * mean_chain[i - 1] + c[i] * z0)
        variances.append(w @ cov @ w)
    return np.array(means), np.array(variances)


def run_error_stats(config):
    """Sample every estimator's error over ``config.trials`` injected-error trials."""
    if isinstance(config, dict):
        config = StatsConfig(**config)
    config.validate()
    sched = build_schedule(config.schedule_kind, config.schedule_T, config.schedule_params)
    grid = make_grid(sched, config.N, config.offset)
    N, d, n = grid.N, config.dim, config.trials
    r, c = coefficient_table(sched, grid)
    z0 = config.z0_scale * np.random.default_rng(config.seed).standard_normal(d)
    err = ErrorModel(config.gamma, config.rho, config.seed)
    gamma = np.asarray(err._sqrt_gamma(N + 1)) ** 2

    starts = list(range(0, n, config.chunk))

    def work(start):
        m = min(config.chunk, n - start)
        e = err.batch(m, N + 1, d, first_trial=start)
        _, d_ife, d_na, d_dd = kernels.error_deltas(z0, e, r, c)
        return {"ife": d_ife, "no-approx": d_na, "ddim-prev": d_dd}

    if config.workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            chunks = list(pool.map(work, starts))
    else:
        chunks = [work(s) for s in starts]

    coeffs = [step_coefficients(sched, grid, i) for i in range(1, N + 1)]
    abar = sched.alpha_bar[grid.indices[1:]]
    na_var = np.array([theory_variance("no-approx", k.eta, abar[i - 1], gamma[i])
                       for i, k in enumerate(coeffs, start=1)])
    # step 1 has no previous error to subtract, so IFE coincides with no-approx there
    ife_var = na_var.copy()
    for i in range(2, N + 1):
        ife_var[i - 1] = theory_variance("ife", coeffs[i - 1].eta, abar[i - 1], gamma[i], gamma[i - 1], config.rho)
    theory = {
        "no-approx": (np.zeros((N, d)), na_var),
        "ife": (np.zeros((N, d)), ife_var),
    }
    theory["ddim-prev"] = _ddim_theory(r, c, z0, _error_covariance(gamma, config.rho, N + 1))

    report = {}
    for name in config.estimators:
        mom = Moments((N, d))
        for ch in chunks:
            mom = mom.merge(Moments.of(ch[name]))
        deltas = np.concatenate([ch[name] for ch in chunks])
        sample_means = deltas.mean(axis=2)
        sample_vars = deltas.var(axis=2, ddof=1) if d > 1 else np.zeros_like(sample_means)
        centered = deltas - mom.mean
        var_pooled = (centered**2).sum(axis=(0, 2)) / (d * (n - 1))
        st = EstimatorStats(
            name=name,
            mean=mom.mean,
            var=mom.var,
            var_pooled=var_pooled,
            mse=(deltas**2).mean(axis=(0, 2)),
            trial_mean=deltas.mean(axis=1),
            theory_mean=theory[name][0],
            theory_var=theory[name][1],
            sample_means=sample_means,
            sample_vars=sample_vars,
            sample_mse=(deltas**2).mean(axis=2),
        )
        st.hist_mean = histogram(sample_means, config.bins)
        st.hist_var = histogram(sample_vars, config.bins)
        st.hist_mse = histogram(st.sample_mse, config.bins)
        st.hist_values = [histogram(deltas[:, i], config.bins) for i in range(N)]
        report[name] = st
    return StatsReport(config, np.asarray(grid.indices), z0, report)
