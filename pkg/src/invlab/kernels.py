"""Hot numeric kernels.

Every kernel exists twice: a vectorised numpy version (``*_numpy``) and a
loop version compiled with numba (``*_numba``). The public name is bound to
one of them at import time according to :data:`invlab._accel.USE_NUMBA`.
Both versions are always importable so tests and the benchmark can compare
them directly.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "gmm_eps",
    "ar1_unit",
    "error_deltas",
    "gmm_eps_numpy",
    "gmm_eps_numba",
    "ar1_unit_numpy",
    "ar1_unit_numba",
    "error_deltas_numpy",
    "error_deltas_numba",
    "BACKEND",
]


# --------------------------------------------------------------------------
# exact noise prediction of an isotropic Gaussian mixture
# --------------------------------------------------------------------------

def gmm_eps_numpy(z, means, variances, log_weights, abar):
    """Exact eps for a batch ``z`` of shape (n, d) under the noised mixture at ``abar``."""
    d = z.shape[1]
    var_t = abar * variances + (1.0 - abar)                      # (K,)
    diff = z[:, None, :] - math.sqrt(abar) * means[None, :, :]   # (n, K, d)
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    logp = log_weights - 0.5 * d * np.log(2.0 * np.pi * var_t) - 0.5 * sq / var_t
    logp -= logp.max(axis=1, keepdims=True)
    resp = np.exp(logp)
    resp /= resp.sum(axis=1, keepdims=True)
    # eps = sqrt(1 - abar) * sum_k resp_k * diff_k / var_k
    return math.sqrt(1.0 - abar) * np.einsum("nk,nkd->nd", resp / var_t, diff)


def _gmm_eps_loops(z, means, variances, log_weights, abar):
    n, d = z.shape
    K = means.shape[0]
    sa = math.sqrt(abar)
    out = np.zeros((n, d))
    var_t = np.empty(K)
    logp = np.empty(K)
    for k in range(K):
        var_t[k] = abar * variances[k] + (1.0 - abar)
    for j in range(n):
        best = -np.inf
        for k in range(K):
            sq = 0.0
            for m in range(d):
                u = z[j, m] - sa * means[k, m]
                sq += u * u
            lp = log_weights[k] - 0.5 * d * math.log(2.0 * math.pi * var_t[k]) - 0.5 * sq / var_t[k]
            logp[k] = lp
            if lp > best:
                best = lp
        total = 0.0
        for k in range(K):
            logp[k] = math.exp(logp[k] - best)
            total += logp[k]
        for k in range(K):
            wk = logp[k] / total / var_t[k]
            for m in range(d):
                out[j, m] += wk * (z[j, m] - sa * means[k, m])
    sb = math.sqrt(1.0 - abar)
    for j in range(n):
        for m in range(d):
            out[j, m] *= sb
    return out


gmm_eps_numba = njit(_gmm_eps_loops)


# --------------------------------------------------------------------------
# unit-variance AR(1) chains
# --------------------------------------------------------------------------

def ar1_unit_numpy(xi, rho):
    """Turn innovations ``xi`` of shape (n, S, d) into stationary unit-variance AR(1) chains along axis 1."""
    out = np.empty_like(xi)
    out[:, 0] = xi[:, 0]
    c = math.sqrt(1.0 - rho * rho)
    for k in range(1, xi.shape[1]):
        out[:, k] = rho * out[:, k - 1] + c * xi[:, k]
    return out


def _ar1_unit_loops(xi, rho):
    n, S, d = xi.shape
    out = np.empty_like(xi)
    c = math.sqrt(1.0 - rho * rho)
    for j in range(n):
        for m in range(d):
            out[j, 0, m] = xi[j, 0, m]
        for k in range(1, S):
            for m in range(d):
                out[j, k, m] = rho * out[j, k - 1, m] + c * xi[j, k, m]
    return out


ar1_unit_numba = njit(_ar1_unit_loops)


# --------------------------------------------------------------------------
# estimation errors of the three fixed-point estimators
# --------------------------------------------------------------------------

def error_deltas_numpy(z0, e, r, c):
    """Ground-truth chain and estimator errors under injected data-prediction errors.

    ``e`` has shape (n, N+1, d) with ``e[:, i]`` the error at grid point i;
    ``r[i]`` and ``c[i] = eta_i * sqrt(abar_i)`` are the step-i coefficients
    (index 0 unused). Returns ``(z_true, d_ife, d_noapprox, d_ddim)`` where
    ``z_true`` is (n, N+1, d) and each delta is (n, N, d), row i-1 holding step i.
    The previous-step error used by the IFE estimate is extracted from the
    chain itself, not read back from ``e``.
    """
    n, S, d = e.shape
    N = S - 1
    z = np.empty((n, S, d))
    z[:, 0] = z0
    d_ife = np.empty((n, N, d))
    d_na = np.empty((n, N, d))
    d_dd = np.empty((n, N, d))
    for i in range(1, S):
        z[:, i] = r[i] * z[:, i - 1] + c[i] * (z0 + e[:, i])
        if i >= 2:
            e_prev = (z[:, i - 1] - r[i - 1] * z[:, i - 2]) / c[i - 1] - z0
        else:
            e_prev = 0.0
        z_hat = r[i] * z[:, i - 1] + c[i] * (z0 + e_prev)
        z_tilde = r[i] * z[:, i - 1] + c[i] * z0
        d_ife[:, i - 1] = z[:, i] - z_hat
        d_na[:, i - 1] = z[:, i] - z_tilde
        d_dd[:, i - 1] = z[:, i] - z[:, i - 1]
    return z, d_ife, d_na, d_dd


def _error_deltas_loops(z0, e, r, c):
    n, S, d = e.shape
    N = S - 1
    z = np.empty((n, S, d))
    d_ife = np.empty((n, N, d))
    d_na = np.empty((n, N, d))
    d_dd = np.empty((n, N, d))
    for j in range(n):
        for m in range(d):
            z[j, 0, m] = z0[m]
        for i in range(1, S):
            for m in range(d):
                z[j, i, m] = r[i] * z[j, i - 1, m] + c[i] * (z0[m] + e[j, i, m])
                if i >= 2:
                    e_prev = (z[j, i - 1, m] - r[i - 1] * z[j, i - 2, m]) / c[i - 1] - z0[m]
                else:
                    e_prev = 0.0
                z_hat = r[i] * z[j, i - 1, m] + c[i] * (z0[m] + e_prev)
                z_tilde = r[i] * z[j, i - 1, m] + c[i] * z0[m]
                d_ife[j, i - 1, m] = z[j, i, m] - z_hat
                d_na[j, i - 1, m] = z[j, i, m] - z_tilde
                d_dd[j, i - 1, m] = z[j, i, m] - z[j, i - 1, m]
    return z, d_ife, d_na, d_dd


error_deltas_numba = njit(_error_deltas_loops)


if USE_NUMBA:
    BACKEND = "numba"
    gmm_eps = gmm_eps_numba
    ar1_unit = ar1_unit_numba
    error_deltas = error_deltas_numba
else:
    BACKEND = "numpy"
    gmm_eps = gmm_eps_numpy
    ar1_unit = ar1_unit_numpy
    error_deltas = error_deltas_numpy
