"""Forward marginals, data/noise conversions and deterministic DDIM denoising.

Latents are plain float64 numpy arrays. Every function broadcasts over
leading axes, so a batch of latents can be pushed through at once.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlphaBoundary, NonFiniteLatent, ShapeMismatch
from .schedule import step_coefficients

__all__ = [
    "as_latent",
    "Trajectory",
    "forward_marginal_sample",
    "data_prediction",
    "noise_from_data",
    "ddim_denoise_update",
    "ddim_denoise_step",
    "ddim_denoise",
    "dump_trajectory",
    "load_trajectory",
]


def as_latent(x):
    """Coerce to a float64 array, rejecting NaN and Inf."""
    z = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteLatent("latent contains NaN or Inf")
    return z


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"shape {np.shape(a)} != {np.shape(b)}")


def _ab(schedule, t):
    return schedule(t)


def forward_marginal_sample(schedule, z0, t, eps):
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``."""
    _same_shape(z0, eps)
    ab = _ab(schedule, t)
    return math.sqrt(ab) * as_latent(z0) + math.sqrt(1.0 - ab) * as_latent(eps)


def data_prediction(schedule, z, t, eps):
    """Clean-sample prediction implied by noise prediction ``eps`` at (z, t)."""
    _same_shape(z, eps)
    ab = _ab(schedule, t)
    if ab <= 0.0:
        raise AlphaBoundary(f"alpha_bar is zero at t={t}")
    return (np.asarray(z) - math.sqrt(1.0 - ab) * np.asarray(eps)) / math.sqrt(ab)


def noise_from_data(schedule, z, t, z0_hat):
    """Noise prediction implied by a clean-sample prediction at (z, t)."""
    _same_shape(z, z0_hat)
    ab = _ab(schedule, t)
    if ab >= 1.0:
        raise AlphaBoundary(f"alpha_bar is one at t={t}")
    return (np.asarray(z) - math.sqrt(ab) * np.asarray(z0_hat)) / math.sqrt(1.0 - ab)


@dataclass
class Trajectory:
    """Latents ``z_{t_0} .. z_{t_N}`` plus the per-step eps and data predictions.

    ``eps[i-1]`` is the noise prediction used by step i (between grid points
    i-1 and i) and ``data_pred[i-1]`` the data prediction it implies at
    ``z_{t_i}``. Latent rows are always in grid order regardless of direction.
    """

    grid: object
    latents: np.ndarray
    eps: np.ndarray
    data_pred: np.ndarray
    direction: str
    nfe: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        N = self.grid.N
        if len(self.latents) != N + 1 or len(self.eps) != N or len(self.data_pred) != N:
            raise ShapeMismatch("trajectory arrays do not match the grid length")

    @property
    def z0(self):
        return self.latents[0]

    @property
    def zN(self):
        return self.latents[-1]


def _empty_trajectory_arrays(N, shape):
    return np.empty((N + 1,) + shape), np.empty((N,) + shape), np.empty((N,) + shape)


def ddim_denoise_step(predictor, schedule, grid, i, z_ti, c=None):
    """One deterministic DDIM step from grid point i to i-1 (one predictor call)."""
    z_prev, _, _ = _denoise_step(predictor, schedule, grid, i, as_latent(z_ti), c)
    return z_prev


def ddim_denoise_update(k, z, eps):
    """Apply the DDIM denoising update with coefficients ``k``; returns (z_prev, x0_hat)."""
    x0 = (z - k.sigma * eps) / k.s
    return k.s_prev * x0 + k.sigma_prev * eps, x0


def _denoise_step(predictor, schedule, grid, i, z, c):
    k = step_coefficients(schedule, grid, i, check=False)
    eps = predictor(z, grid[i], c)
    z_prev, x0 = ddim_denoise_update(k, z, eps)
    return z_prev, eps, x0


def ddim_denoise(predictor, schedule, grid, z_tN, c=None):
    """Denoise from ``z_{t_N}`` down to ``z_{t_0}``; exactly N predictor calls."""
    z = as_latent(z_tN)
    lat, eps_arr, x0_arr = _empty_trajectory_arrays(grid.N, z.shape)
    lat[grid.N] = z
    start = predictor.nfe
    for i in range(grid.N, 0, -1):
        z, eps, x0 = _denoise_step(predictor, schedule, grid, i, z, c)
        lat[i - 1] = z
        eps_arr[i - 1] = eps
        x0_arr[i - 1] = x0
    return Trajectory(grid, lat, eps_arr, x0_arr, "denoising", predictor.nfe - start)


def dump_trajectory(traj, path):
    """Write one JSON line per grid point: ``{i, t_i, z, eps, data_pred}``.

    Row 0 carries ``null`` eps and data_pred since no step ends there.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(traj.grid.N + 1):
            rec = {
                "i": i,
                "t_i": traj.grid[i],
                "z": traj.latents[i].tolist(),
                "eps": traj.eps[i - 1].tolist() if i else None,
                "data_pred": traj.data_pred[i - 1].tolist() if i else None,
            }
            fh.write(json.dumps(rec) + "\n")


def load_trajectory(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
