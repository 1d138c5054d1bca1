"""Diffusion inversion strategies.

All strategies walk the grid from ``z_{t_0}`` (the data) to ``z_{t_N}``.
Step i maps ``z_{t_{i-1}}`` to ``z_{t_i}`` through the DDIM inversion update
``z_i = a z_{i-1} + b eps`` and differ only in where eps is evaluated:

* ``ddim``      eps at the previous latent (biased shortcut, one call per step)
* ``fp``        fixed-point iteration on ``z = a z_{i-1} + b eps(z, t_i)``
* ``ife``       eps at an explicit estimate of the fixed point (one call per step)
* ``ife-noerr`` as ``ife`` but the estimate ignores the prediction error
* ``oracle``    fixed-point iteration run to 1e-12, used as ground truth

The explicit estimate comes from substituting ``eps = (z - s x0_hat)/sigma``
with ``x0_hat = z0 + e`` into the update, which solves for the fixed point as
``z_i = r z_{i-1} + eta s (z0 + e_i)``.
"""

import re
from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory, as_latent
from .errors import DivergenceError, NoConvergence, UnknownMethod
from .schedule import step_coefficients

__all__ = [
    "InversionMethod",
    "PredictionError",
    "parse_method",
    "ddim_invert_update",
    "explicit_fixed_point",
    "naive_ddim_invert_step",
    "fixed_point_invert_step",
    "oracle_fixed_point",
    "initial_estimate",
    "extract_prev_error",
    "ife_estimate",
    "no_approx_estimate",
    "ife_invert_step",
    "ife_invert",
    "invert",
]

METHOD_NAMES = ("ddim-naive", "fixed-point", "ife", "ife-no-error-approx", "ife-no-init", "oracle")
EPS_TIME_MODES = ("prev-time", "next-time")
ORACLE_TOL = 1e-12


@dataclass(frozen=True)
class InversionMethod:
    """A configured inversion strategy.

    ``tol`` is the early-stop threshold of the fixed-point baseline and the
    convergence target of the oracle. For ``fixed-point`` it defaults to
    ``None``: every step spends exactly ``1 + extra_iters`` evaluations.
    """

    name: str
    extra_iters: int = 0
    tol: float = None
    eps_time_mode: str = "prev-time"
    max_iters: int = 1000

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise UnknownMethod(f"unknown inversion method {self.name!r}")
        if self.extra_iters < 0:
            raise ValueError("extra_iters must be >= 0")
        if self.tol is None and self.name == "oracle":
            object.__setattr__(self, "tol", ORACLE_TOL)
        if self.tol is not None and not self.tol > 0.0:
            raise ValueError("tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.eps_time_mode not in EPS_TIME_MODES:
            raise ValueError(f"eps_time_mode must be one of {EPS_TIME_MODES}")

    @property
    def label(self):
        """Canonical config string; ``parse_method(m.label) == m``."""
        if self.name == "ddim-naive":
            return "ddim" if self.eps_time_mode == "prev-time" else "ddim:mode=next-time"
        if self.name == "fixed-point":
            tail = "" if self.tol is None else f",tol={self.tol!r}"
            return f"fp:k={self.extra_iters}{tail}"
        if self.name == "oracle":
            return "oracle" if self.tol == ORACLE_TOL else f"oracle:tol={self.tol!r}"
        return {"ife": "ife", "ife-no-error-approx": "ife-noerr", "ife-no-init": "ife-noinit"}[self.name]


_ALIASES = {
    "ddim": "ddim-naive", "ddim-naive": "ddim-naive",
    "fp": "fixed-point", "fixed-point": "fixed-point",
    "ife": "ife",
    "ife-noerr": "ife-no-error-approx", "ife-no-error-approx": "ife-no-error-approx",
    "ife-noinit": "ife-no-init", "ife-no-init": "ife-no-init",
    "oracle": "oracle",
}


def parse_method(spec):
    """Parse strings such as ``"ddim"``, ``"fp:k=3,tol=1e-6"``, ``"ife"``, ``"ife-noerr"``, ``"oracle"``."""
    if isinstance(spec, InversionMethod):
        return spec
    head, _, tail = str(spec).strip().partition(":")
    try:
        name = _ALIASES[head.strip().lower()]
    except KeyError:
        raise UnknownMethod(f"unknown inversion method {spec!r}") from None
    kw = {}
    for item in filter(None, (p.strip() for p in tail.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise UnknownMethod(f"malformed option {item!r} in {spec!r}")
        key = key.strip().lower()
        if key in ("k", "extra_iters") and name == "fixed-point":
            if not re.fullmatch(r"\d+", val.strip()):
                raise UnknownMethod(f"k must be a non-negative integer in {spec!r}")
            kw["extra_iters"] = int(val)
        elif key == "tol" and name in ("fixed-point", "oracle"):
            kw["tol"] = float(val)
        elif key == "max_iters" and name in ("fixed-point", "oracle"):
            kw["max_iters"] = int(val)
        elif key == "mode" and name == "ddim-naive":
            kw["eps_time_mode"] = val.strip()
        else:
            raise UnknownMethod(f"option {key!r} not valid for {name!r}")
    try:
        return InversionMethod(name, **kw)
    except ValueError as exc:
        raise UnknownMethod(str(exc)) from None


@dataclass(frozen=True)
class PredictionError:
    e: np.ndarray
    step_index: int


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def ddim_invert_update(k, z_prev, eps):
    """``a z_prev + b eps`` for step coefficients ``k``."""
    return k.a * z_prev + k.b * eps


def explicit_fixed_point(schedule, grid, i, z_prev, z0, e):
    """``r z_prev + eta s (z0 + e)``: the fixed point of step i when the data prediction error is ``e``."""
    k = step_coefficients(schedule, grid, i)
    return k.r * np.asarray(z_prev) + k.eta * k.s * (np.asarray(z0) + np.asarray(e))


def _implied_data_pred(k, z, eps):
    return (z - k.sigma * eps) / k.s


def naive_ddim_invert_step(predictor, schedule, grid, i, z_prev, mode="prev-time", c=None):
    """One DDIM inversion step with eps taken at the previous latent."""
    return _naive_step(predictor, schedule, grid, i, as_latent(z_prev), mode, c)[0]


def _naive_step(predictor, schedule, grid, i, z_prev, mode, c):
    k = step_coefficients(schedule, grid, i, check=False)
    if mode == "prev-time":
        eps = predictor(z_prev, grid[i - 1], c)
    elif mode == "next-time":
        eps = predictor(z_prev, grid[i], c)
    else:
        raise ValueError(f"eps_time_mode must be one of {EPS_TIME_MODES}")
    return ddim_invert_update(k, z_prev, eps), eps


def _iterate(predictor, schedule, grid, i, z_prev, max_calls, tol, c):
    """Apply ``g(z) = a z_prev + b eps(z, t_i)`` starting from ``z_prev``.

    Stops after ``max_calls`` applications or once successive iterates differ
    by less than ``tol`` in the max norm. Returns ``(z, eps, calls, residuals)``.
    """
    k = step_coefficients(schedule, grid, i, check=False)
    t = grid[i]
    z = z_prev
    residuals = []
    eps = None
    for n in range(max_calls):
        eps = predictor(z, t, c)
        z_next = ddim_invert_update(k, z_prev, eps)
        if not np.all(np.isfinite(z_next)):
            raise DivergenceError(f"fixed-point iterate became non-finite at step {i}, iteration {n + 1}")
        res = float(np.max(np.abs(z_next - z))) if z_next.size else 0.0
        residuals.append(res)
        z = z_next
        if tol is not None and res < tol:
            break
    return z, eps, len(residuals), residuals


def fixed_point_invert_step(predictor, schedule, grid, i, z_prev, extra_iters=0, tol=1e-6, c=None):
    """Fixed-point inversion step: at most ``1 + extra_iters`` applications of g.

    Stops early once successive iterates agree to ``tol`` in the max norm;
    ``tol=None`` always spends the full ``1 + extra_iters`` evaluations.
    """
    z, _, _, _ = _iterate(predictor, schedule, grid, i, as_latent(z_prev), 1 + extra_iters, tol, c)
    return z


def oracle_fixed_point(predictor, schedule, grid, i, z_prev, tol=ORACLE_TOL, max_iters=1000, c=None):
    """Iterate g to ``||g(z) - z||_inf <= tol``; raises :class:`NoConvergence` otherwise."""
    z, eps, calls, res = _iterate(predictor, schedule, grid, i, as_latent(z_prev), max_iters, tol, c)
    if res and res[-1] > tol:
        raise NoConvergence(f"step {i}: residual {res[-1]:.3e} after {calls} iterations", res[-1])
    return z


def initial_estimate(schedule, grid, z0):
    """Fixed-point estimate for step 1, neglecting the prediction error there."""
    z0 = as_latent(z0)
    return explicit_fixed_point(schedule, grid, 1, z0, z0, 0.0)


def extract_prev_error(schedule, grid, i, z_prev2, z_prev, z0):
    """Data-prediction error of step i-1, recovered from ``z_{t_{i-2}}`` and ``z_{t_{i-1}}``.

    Inverts ``z_{i-1} = r z_{i-2} + eta s (z0 + e)`` using the step i-1
    coefficients.
    """
    if i < 2:
        raise ValueError("error extraction needs two previous latents (i >= 2)")
    k = step_coefficients(schedule, grid, i - 1)
    e = (np.asarray(z_prev) - k.r * np.asarray(z_prev2)) / (k.eta * k.s) - np.asarray(z0)
    return PredictionError(e, i - 1)


def ife_estimate(schedule, grid, i, z_prev, z0, e_prev):
    """Fixed-point estimate for step i >= 2, approximating the current error by ``e_prev``."""
    e = e_prev.e if isinstance(e_prev, PredictionError) else e_prev
    return explicit_fixed_point(schedule, grid, i, z_prev, z0, e)


def no_approx_estimate(schedule, grid, i, z_prev, z0):
    """Fixed-point estimate that drops the prediction error altogether."""
    return explicit_fixed_point(schedule, grid, i, z_prev, z0, 0.0)


def ife_invert_step(predictor, schedule, grid, i, z_hat, z_prev, c=None):
    """DDIM inversion update with eps evaluated once at the estimate ``z_hat``."""
    return _ife_step(predictor, schedule, grid, i, as_latent(z_hat), as_latent(z_prev), c)[0]


def _ife_step(predictor, schedule, grid, i, z_hat, z_prev, c):
    k = step_coefficients(schedule, grid, i, check=False)
    eps = predictor(z_hat, grid[i], c)
    return ddim_invert_update(k, z_prev, eps), eps


# --------------------------------------------------------------------------
# full inversions
# --------------------------------------------------------------------------

def _run(schedule, grid, z0, step):
    """Drive ``step(i, latents) -> (z_i, eps, info)`` over the grid and collect a Trajectory."""
    z0 = as_latent(z0)
    N = grid.N
    lat = np.empty((N + 1,) + z0.shape)
    eps_arr = np.empty((N,) + z0.shape)
    x0_arr = np.empty((N,) + z0.shape)
    lat[0] = z0
    infos = []
    for i in range(1, N + 1):
        z, eps, info = step(i, lat)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"inversion produced a non-finite latent at step {i}")
        k = step_coefficients(schedule, grid, i, check=False)
        lat[i] = z
        eps_arr[i - 1] = eps
        x0_arr[i - 1] = _implied_data_pred(k, z, eps)
        infos.append(info)
    return lat, eps_arr, x0_arr, infos


def ife_invert(predictor, schedule, grid, z0, c=None, error_approx=True, init_estimate=True):
    """Iteration-free inversion: one explicit estimate and one predictor call per step.

    ``error_approx=False`` gives the variant that drops the error term;
    ``init_estimate=False`` takes step 1 as a plain DDIM inversion step
    (eps at ``(z0, t_0)``) instead of evaluating at the initial estimate.
    """
    z0 = as_latent(z0)
    start = predictor.nfe

    def step(i, lat):
        if i == 1 and not init_estimate:
            z, eps = _naive_step(predictor, schedule, grid, 1, z0, "prev-time", c)
            return z, eps, z0
        if i == 1:
            z_hat = initial_estimate(schedule, grid, z0)
        elif error_approx:
            e_prev = extract_prev_error(schedule, grid, i, lat[i - 2], lat[i - 1], z0)
            z_hat = ife_estimate(schedule, grid, i, lat[i - 1], z0, e_prev)
        else:
            z_hat = no_approx_estimate(schedule, grid, i, lat[i - 1], z0)
        z, eps = _ife_step(predictor, schedule, grid, i, z_hat, lat[i - 1], c)
        return z, eps, z_hat

    lat, eps, x0, estimates = _run(schedule, grid, z0, step)
    traj = Trajectory(grid, lat, eps, x0, "inversion", predictor.nfe - start)
    traj.diagnostics["estimates"] = np.stack(estimates)
    return traj


def invert(method, predictor, schedule, grid, z0, c=None):
    """Invert ``z0`` with ``method`` (an :class:`InversionMethod` or a config string)."""
    m = parse_method(method)
    if m.name == "ife":
        traj = ife_invert(predictor, schedule, grid, z0, c)
    elif m.name == "ife-no-error-approx":
        traj = ife_invert(predictor, schedule, grid, z0, c, error_approx=False)
    elif m.name == "ife-no-init":
        traj = ife_invert(predictor, schedule, grid, z0, c, init_estimate=False)
    else:
        start = predictor.nfe
        if m.name == "ddim-naive":
            def step(i, lat):
                z, eps = _naive_step(predictor, schedule, grid, i, lat[i - 1], m.eps_time_mode, c)
                return z, eps, 1
        else:
            calls = m.max_iters if m.name == "oracle" else 1 + m.extra_iters

            def step(i, lat):
                z, eps, n, res = _iterate(predictor, schedule, grid, i, lat[i - 1], calls, m.tol, c)
                if m.name == "oracle" and res[-1] > m.tol:
                    raise NoConvergence(f"step {i}: residual {res[-1]:.3e} after {n} iterations", res[-1])
                return z, eps, (n, res[-1])

        lat, eps, x0, infos = _run(schedule, grid, z0, step)
        traj = Trajectory(grid, lat, eps, x0, "inversion", predictor.nfe - start)
        if m.name != "ddim-naive":
            traj.diagnostics["iterations"] = np.array([n for n, _ in infos])
            traj.diagnostics["residuals"] = np.array([r for _, r in infos])
    traj.diagnostics["method"] = m.label
    return traj
