"""Discrete noise schedules, inversion timestep grids and per-step coefficients."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EtaSingular, GridDegenerate, InvalidParams

KINDS = ("linear-beta", "scaled-linear-beta", "cosine")

DEFAULT_KIND = "scaled-linear-beta"
DEFAULT_T = 1000
DEFAULT_PARAMS = {"beta_start": 8.5e-4, "beta_end": 1.2e-2}

ETA_SINGULAR_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Table of cumulative signal coefficients ``alpha_bar[t]`` for t = 0..T-1."""

    kind: str
    alpha_bar: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        ab = np.array(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 1:
            raise InvalidParams("alpha_bar must be a non-empty 1-d table")
        if self.kind not in KINDS:
            raise InvalidParams(f"unknown schedule kind {self.kind!r}")
        if not np.all(np.isfinite(ab)) or np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise InvalidParams("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise InvalidParams("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "params", dict(self.params))

    @property
    def T(self):
        return self.alpha_bar.size

    def __call__(self, t):
        return alpha_bar(self, t)

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return (self.kind == other.kind and self.params == other.params
                and np.array_equal(self.alpha_bar, other.alpha_bar))

    __hash__ = None

    def to_json(self):
        # 17 significant digits keeps every float64 bit-exact on reload
        table = ", ".join(f"{x:.17g}" for x in self.alpha_bar)
        head = json.dumps({"kind": self.kind, "T": self.T, "params": self.params})
        return head[:-1] + f', "alpha_bar": [{table}]}}'

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        try:
            sched = cls(obj["kind"], obj["alpha_bar"], obj.get("params", {}))
        except KeyError as exc:
            raise InvalidParams(f"schedule JSON missing {exc.args[0]!r}") from None
        if "T" in obj and obj["T"] != sched.T:
            raise InvalidParams(f"T={obj['T']} disagrees with alpha_bar length {sched.T}")
        return sched


def _beta_range(params):
    if "beta" in params:
        start = end = float(params["beta"])
    else:
        try:
            start, end = float(params["beta_start"]), float(params["beta_end"])
        except KeyError as exc:
            raise InvalidParams(f"missing schedule parameter {exc.args[0]!r}") from None
    if not (0.0 < start <= end < 1.0):
        raise InvalidParams(f"need 0 < beta_start <= beta_end < 1, got {start}, {end}")
    return start, end


def build_schedule(kind=DEFAULT_KIND, T=DEFAULT_T, params=None):
    """Build a :class:`NoiseSchedule`.

    ``linear-beta`` and ``scaled-linear-beta`` take ``beta_start``/``beta_end``
    (or a single ``beta``); ``cosine`` takes an optional offset ``s`` and
    ``max_beta``. For beta-based kinds ``alpha_bar[t] = prod_{u<=t} (1 - beta_u)``.
    """
    if params is None:
        params = dict(DEFAULT_PARAMS) if kind != "cosine" else {}
    params = dict(params)
    if int(T) != T or T < 1:
        raise InvalidParams(f"T must be a positive integer, got {T}")
    T = int(T)
    if kind == "linear-beta":
        start, end = _beta_range(params)
        betas = np.linspace(start, end, T)
    elif kind == "scaled-linear-beta":
        start, end = _beta_range(params)
        betas = np.linspace(math.sqrt(start), math.sqrt(end), T) ** 2
    elif kind == "cosine":
        s = float(params.get("s", 0.008))
        max_beta = float(params.get("max_beta", 0.999))
        if s < 0.0 or not (0.0 < max_beta < 1.0):
            raise InvalidParams(f"invalid cosine parameters s={s}, max_beta={max_beta}")
        f = np.cos((np.arange(T + 1) / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], max_beta)
        if np.any(betas <= 0.0):
            raise InvalidParams("cosine schedule produced a non-positive beta")
    else:
        raise InvalidParams(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind, np.cumprod(1.0 - betas), params)


def alpha_bar(schedule, t):
    """Stored ``alpha_bar`` at model timestep ``t``."""
    if int(t) != t or not 0 <= t < schedule.T:
        raise IndexError(f"timestep {t} outside [0, {schedule.T})")
    return float(schedule.alpha_bar[int(t)])


@dataclass(frozen=True, eq=False)
class TimestepGrid:
    """Strictly increasing model timesteps t_0 < ... < t_N."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size < 3:
            raise GridDegenerate("a grid needs N >= 2 steps (N+1 indices)")
        if np.any(np.diff(idx) <= 0):
            raise GridDegenerate(f"grid indices must be strictly increasing: {idx.tolist()}")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def N(self):
        return self.indices.size - 1

    def __len__(self):
        return self.indices.size

    def __getitem__(self, i):
        return int(self.indices[i])

    def __eq__(self, other):
        if not isinstance(other, TimestepGrid):
            return NotImplemented
        return np.array_equal(self.indices, other.indices)

    __hash__ = None


def make_grid(schedule, N=50, offset=1):
    """Uniform grid ``t_i = offset + i * floor((T - offset) / N)``, clipped to T-1."""
    if N < 2:
        raise GridDegenerate(f"N must be >= 2, got {N}")
    if offset < 0 or offset >= schedule.T:
        raise GridDegenerate(f"offset {offset} outside [0, {schedule.T})")
    stride = (schedule.T - offset) // N
    idx = np.minimum(offset + stride * np.arange(N + 1), schedule.T - 1)
    if stride == 0 or np.any(np.diff(idx) <= 0):
        raise GridDegenerate(f"T={schedule.T} cannot hold {N} distinct steps after offset {offset}")
    if schedule.alpha_bar[idx[0]] >= 1.0:
        raise GridDegenerate("alpha_bar at t_0 equals 1; use offset >= 1")
    return TimestepGrid(idx)


@dataclass(frozen=True)
class StepCoefficients:
    """Coefficients of the step between grid points i-1 and i.

    ``a`` and ``b`` are the DDIM inversion weights on z_{t_{i-1}} and eps,
    ``r`` the noise-level ratio, ``s = sqrt(alpha_bar_i)`` and ``eta`` the
    weight on the data prediction in the explicit fixed-point form.
    """

    a: float
    b: float
    r: float
    eta: float
    s: float
    s_prev: float
    sigma: float
    sigma_prev: float

    @classmethod
    def from_alpha_bars(cls, ab_prev, ab, check=True):
        s_prev, s = math.sqrt(ab_prev), math.sqrt(ab)
        sigma_prev, sigma = math.sqrt(1.0 - ab_prev), math.sqrt(1.0 - ab)
        a = s / s_prev
        b = sigma - a * sigma_prev
        r = sigma / sigma_prev if sigma_prev > 0.0 else math.inf
        eta = 1.0 - (s_prev / s) * r
        if check and not abs(eta) >= ETA_SINGULAR_TOL:
            raise EtaSingular(f"|eta| = {abs(eta):.3g} below {ETA_SINGULAR_TOL:g} "
                              f"(alpha_bar pair {ab_prev!r}, {ab!r})")
        return cls(a, b, r, eta, s, s_prev, sigma, sigma_prev)


def step_coefficients(schedule, grid, i, check=True):
    """Coefficients of inversion step ``i`` (1 <= i <= N)."""
    if not 1 <= i <= grid.N:
        raise IndexError(f"step {i} outside [1, {grid.N}]")
    return StepCoefficients.from_alpha_bars(
        schedule.alpha_bar[grid[i - 1]], schedule.alpha_bar[grid[i]], check=check)


def coefficient_table(schedule, grid):
    """Arrays ``(r, c)`` indexed by step with ``c = eta * sqrt(alpha_bar)``; entry 0 is unused."""
    r = np.zeros(grid.N + 1)
    c = np.zeros(grid.N + 1)
    for i in range(1, grid.N + 1):
        k = step_coefficients(schedule, grid, i)
        r[i], c[i] = k.r, k.eta * k.s
    return r, c
