import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from invlab import kernels
from invlab._accel import HAVE_NUMBA, USE_NUMBA


def random_mixture(rng, n=64, d=5, K=3):
    return (rng.standard_normal((n, d)) * 3, rng.standard_normal((K, d)), rng.uniform(1e-3, 0.5, K),
            np.log(rng.dirichlet(np.ones(K))))


@given(st.integers(0, 2**32), st.floats(1e-4, 0.9999))
def test_gmm_eps_backends_agree(seed, abar):
    z, mu, var, lw = random_mixture(np.random.default_rng(seed))
    np.testing.assert_allclose(kernels.gmm_eps_numba(z, mu, var, lw, abar),
                               kernels.gmm_eps_numpy(z, mu, var, lw, abar), rtol=1e-11, atol=1e-13)


@given(st.integers(0, 2**32), st.floats(0.0, 1.0))
def test_ar1_backends_agree(seed, rho):
    xi = np.random.default_rng(seed).standard_normal((7, 9, 3))
    np.testing.assert_allclose(kernels.ar1_unit_numba(xi, rho), kernels.ar1_unit_numpy(xi, rho), rtol=1e-13, atol=1e-14)


def brute_force_deltas(z0, e, r, c):
    n, S, d = e.shape
    out = [np.zeros((n, S, d)), np.zeros((n, S - 1, d)), np.zeros((n, S - 1, d)), np.zeros((n, S - 1, d))]
    for j in range(n):
        z = [z0.copy()]
        for i in range(1, S):
            z.append(r[i] * z[i - 1] + c[i] * (z0 + e[j, i]))
        for i in range(1, S):
            e_prev = (z[i - 1] - r[i - 1] * z[i - 2]) / c[i - 1] - z0 if i >= 2 else 0.0
            out[1][j, i - 1] = z[i] - (r[i] * z[i - 1] + c[i] * (z0 + e_prev))
            out[2][j, i - 1] = z[i] - (r[i] * z[i - 1] + c[i] * z0)
            out[3][j, i - 1] = z[i] - z[i - 1]
        out[0][j] = np.array(z)
    return out


@pytest.mark.parametrize("impl", ["numpy", "numba"])
def test_error_deltas_match_brute_force(impl, rng):
    S, d = 8, 3
    r = np.r_[1.0, rng.uniform(1.0, 1.5, S - 1)]
    c = np.r_[0.0, -rng.uniform(0.05, 0.5, S - 1)]
    e = rng.standard_normal((5, S, d))
    z0 = rng.standard_normal(d)
    got = getattr(kernels, f"error_deltas_{impl}")(z0, e, r, c)
    for a, b in zip(got, brute_force_deltas(z0, e, r, c)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_backend_binding():
    assert kernels.BACKEND == ("numba" if USE_NUMBA else "numpy")
    assert kernels.gmm_eps is (kernels.gmm_eps_numba if USE_NUMBA else kernels.gmm_eps_numpy)


def test_env_flag_selects_numpy_fallback():
    env = dict(os.environ, INVLAB_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from invlab import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
def test_numba_kernels_are_compiled():
    assert hasattr(kernels.gmm_eps_numba, "signatures")
