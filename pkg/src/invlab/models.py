"""Noise predictors with exact closed-form scores, plus controlled error injection.

Every predictor is called as ``predictor(z, t, c=None)`` and counts its own
evaluations in :attr:`NoisePredictor.nfe`. The conditioning token ``c`` is
accepted for interface compatibility and ignored by the analytic models.
"""

import json
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dynamics import as_latent, data_prediction, noise_from_data
from .errors import InvalidParams, ShapeMismatch

__all__ = [
    "NoisePredictor",
    "GaussianPredictor",
    "GMMPredictor",
    "PointMassPredictor",
    "PerturbedPredictor",
    "GaussianMixtureModel",
    "ErrorModel",
    "exact_eps_gaussian",
    "exact_eps_gmm",
    "exact_eps_point",
    "perturbed_eps",
    "nfe",
]


class NoisePredictor:
    """Base class: subclasses implement ``_eps(z, t, c)``; ``__call__`` does the bookkeeping."""

    def __init__(self, schedule):
        self.schedule = schedule
        self._nfe = 0
        self._lock = threading.Lock()

    @property
    def nfe(self):
        return self._nfe

    def reset_nfe(self):
        with self._lock:
            self._nfe = 0

    def __call__(self, z, t, c=None):
        z = as_latent(z)
        out = np.asarray(self._eps(z, t, c), dtype=np.float64)
        if out.shape != z.shape:
            raise ShapeMismatch(f"predictor returned shape {out.shape} for input {z.shape}")
        with self._lock:
            self._nfe += 1
        return out

    def _eps(self, z, t, c):
        raise NotImplementedError


def nfe(predictor):
    """Number of evaluations performed so far by ``predictor``."""
    return predictor.nfe


# --------------------------------------------------------------------------
# isotropic Gaussian data, p0 = N(0, s2 I)
# --------------------------------------------------------------------------

def exact_eps_gaussian(data_variance, z, t, schedule):
    """Exact eps for ``p0 = N(0, data_variance * I)``: ``sqrt(1-ab) z / (ab s2 + 1 - ab)``."""
    if data_variance <= 0.0:
        raise InvalidParams("data variance must be positive")
    ab = schedule(t)
    return math.sqrt(1.0 - ab) * np.asarray(z, dtype=np.float64) / (ab * data_variance + 1.0 - ab)


class GaussianPredictor(NoisePredictor):
    """Exact predictor for zero-mean isotropic Gaussian data; linear in z."""

    def __init__(self, schedule, variance=1.0):
        super().__init__(schedule)
        if variance <= 0.0:
            raise InvalidParams("data variance must be positive")
        self.variance = float(variance)

    def gain(self, t):
        """Scalar ``g_t`` with ``eps(z, t) = g_t * z``."""
        ab = self.schedule(t)
        return math.sqrt(1.0 - ab) / (ab * self.variance + 1.0 - ab)

    def _eps(self, z, t, c):
        return exact_eps_gaussian(self.variance, z, t, self.schedule)


# --------------------------------------------------------------------------
# point mass data, p0 = delta(x0)
# --------------------------------------------------------------------------

def exact_eps_point(x0, z, t, schedule):
    """Exact eps when all data sits at ``x0``; its data prediction is ``x0`` everywhere."""
    return noise_from_data(schedule, np.asarray(z, dtype=np.float64), t, np.broadcast_to(x0, np.shape(z)))


class PointMassPredictor(NoisePredictor):
    """Predictor whose data prediction is exactly ``x0`` at every (z, t).

    Combined with :class:`PerturbedPredictor` this realises the
    "data prediction = x0 + e_t" model exactly.
    """

    def __init__(self, schedule, x0):
        super().__init__(schedule)
        self.x0 = as_latent(x0)

    def _eps(self, z, t, c):
        return exact_eps_point(self.x0, z, t, self.schedule)


# --------------------------------------------------------------------------
# isotropic Gaussian mixtures
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianMixtureModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.array(self.means, dtype=np.float64))
        var = np.array(self.variances, dtype=np.float64)
        K = w.size
        if K < 1 or mu.shape[0] != K or var.shape != (K,):
            raise InvalidParams(f"inconsistent mixture sizes: weights {w.shape}, "
                                f"means {mu.shape}, variances {var.shape}")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidParams("weights must lie on the simplex (sum to 1 within 1e-12)")
        if np.any(var <= 0.0) or not np.all(np.isfinite(mu)):
            raise InvalidParams("variances must be positive and means finite")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "log_weights", np.log(w))

    @property
    def K(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    def coordinate_std(self):
        """Marginal standard deviation of one coordinate, averaged over coordinates."""
        mean = self.weights @ self.means
        second = self.weights @ (self.variances + np.sum(self.means**2, axis=1) / self.dim)
        return math.sqrt(second - mean @ mean / self.dim)

    def sample(self, rng, n=None):
        size = 1 if n is None else n
        k = rng.choice(self.K, size=size, p=self.weights)
        x = self.means[k] + np.sqrt(self.variances[k])[:, None] * rng.standard_normal((size, self.dim))
        return x[0] if n is None else x

    @classmethod
    def random(cls, rng, dim, K=3, mean_scale=1.0, var_range=(0.05, 0.25)):
        return cls(rng.dirichlet(np.ones(K)),
                   mean_scale * rng.standard_normal((K, dim)),
                   rng.uniform(*var_range, size=K))

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, obj):
        try:
            return cls(obj["weights"], obj["means"], obj["variances"])
        except KeyError as exc:
            raise InvalidParams(f"mixture spec missing {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)


def exact_eps_gmm(model, z, t, schedule):
    """Exact eps for the mixture; the noised marginal has components
    ``N(sqrt(ab) mu_k, (ab var_k + 1 - ab) I)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.dim:
        raise ShapeMismatch(f"latent dim {z.shape[-1]} != mixture dim {model.dim}")
    flat = np.ascontiguousarray(z.reshape(-1, model.dim))
    out = kernels.gmm_eps(flat, model.means, model.variances, model.log_weights, schedule(t))
    assert np.all(np.isfinite(out)), "mixture responsibilities underflowed"
    return out.reshape(z.shape)


class GMMPredictor(NoisePredictor):
    def __init__(self, schedule, model):
        super().__init__(schedule)
        self.model = model

    def _eps(self, z, t, c):
        return exact_eps_gmm(self.model, z, t, self.schedule)


# --------------------------------------------------------------------------
# error injection
# --------------------------------------------------------------------------

class ErrorModel:
    """Per-step data-prediction errors ``e_k = sqrt(gamma_k) * u_k`` with ``u`` a unit AR(1) chain.

    ``Var[e_k] = gamma_k I`` and ``Cov[e_k, e_{k-1}] = rho sqrt(gamma_k gamma_{k-1}) I``.
    ``rho = 1`` gives the same unit draw at every step. The chain for a trial
    is driven by ``np.random.default_rng([seed, trial, 2])`` so ``e_k`` is a pure
    function of ``(seed, trial, k)``.
    """

    def __init__(self, gamma=0.01, rho=0.0, seed=0):
        g = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
        if np.any(g < 0.0) or not np.all(np.isfinite(g)):
            raise InvalidParams("gamma must be non-negative")
        if not 0.0 <= rho <= 1.0:
            raise InvalidParams(f"rho must lie in [0, 1], got {rho}")
        self.gamma = g
        self.rho = float(rho)
        self.seed = int(seed)

    def gamma_at(self, k):
        return float(self.gamma[0] if self.gamma.size == 1 else self.gamma[k])

    def _sqrt_gamma(self, n_steps):
        if self.gamma.size == 1:
            return np.full(n_steps, math.sqrt(self.gamma[0]))
        if self.gamma.size < n_steps:
            raise InvalidParams(f"gamma schedule has {self.gamma.size} entries, need {n_steps}")
        return np.sqrt(self.gamma[:n_steps])

    def innovations(self, trial, n_steps, dim):
        return np.random.default_rng([self.seed, int(trial), 2]).standard_normal((n_steps, dim))

    def chain(self, trial, n_steps, dim):
        """Errors for grid points 0..n_steps-1 of one trial, shape (n_steps, dim)."""
        xi = self.innovations(trial, n_steps, dim)
        u = kernels.ar1_unit(xi[None], self.rho)[0]
        return u * self._sqrt_gamma(n_steps)[:, None]

    def batch(self, trials, n_steps, dim, first_trial=0):
        """Errors for ``trials`` consecutive trials, shape (trials, n_steps, dim)."""
        xi = np.stack([self.innovations(first_trial + j, n_steps, dim) for j in range(trials)])
        u = kernels.ar1_unit(xi, self.rho)
        return u * self._sqrt_gamma(n_steps)[None, :, None]

    def sample(self, trial, step_index, dim):
        return self.chain(trial, step_index + 1, dim)[step_index]


def perturbed_eps(base, err, step_index, z, t, trial=0, c=None):
    """eps whose data prediction is the base model's shifted by ``e_{step_index}``."""
    z = as_latent(z)
    e = err.sample(trial, step_index, z.shape[-1])
    x0 = data_prediction(base.schedule, z, t, base(z, t, c))
    return noise_from_data(base.schedule, z, t, x0 + e)


class PerturbedPredictor(NoisePredictor):
    """Wraps ``base`` and shifts its data prediction by a per-timestep injected error.

    The error for timestep ``grid[k]`` is the k-th element of the trial's
    error chain; it does not depend on the evaluation point, and the same
    error is reused by every evaluation at that timestep (inversion and
    denoising alike). Only calls through this wrapper count towards its NFE.
    """

    def __init__(self, base, error_model, grid, trial=0, dim=None):
        super().__init__(base.schedule)
        self.base = base
        self.error_model = error_model
        self.grid = grid
        self.trial = trial
        self._step_of = {int(t): k for k, t in enumerate(grid.indices)}
        self._errors = None
        if dim is not None:
            self._errors = error_model.chain(trial, len(grid), dim)

    def error_at(self, step_index, dim):
        if self._errors is None or self._errors.shape[1] != dim:
            self._errors = self.error_model.chain(self.trial, len(self.grid), dim)
        return self._errors[step_index]

    def _eps(self, z, t, c):
        try:
            k = self._step_of[int(t)]
        except KeyError:
            raise ValueError(f"timestep {t} is not on the injection grid") from None
        eps = self.base._eps(z, t, c)
        x0 = data_prediction(self.schedule, z, t, eps)
        return noise_from_data(self.schedule, z, t, x0 + self.error_at(k, z.shape[-1]))
