"""Time the numba kernels against their numpy counterparts.

    python benchmarks/bench_kernels.py [--repeat 5]

Both versions are always importable, so the ``INVLAB_NUMBA`` flag does not
matter here. Compilation happens in a warm-up call that is not timed.
"""

import argparse
import timeit

import numpy as np

from invlab import kernels
from invlab._accel import HAVE_NUMBA


def cases(rng):
    n, d, K = 4096, 8, 3
    z = rng.standard_normal((n, d))
    means = rng.standard_normal((K, d))
    variances = rng.uniform(0.05, 0.25, K)
    log_w = np.log(rng.dirichlet(np.ones(K)))
    yield "gmm_eps  (4096x8, K=3)", kernels.gmm_eps_numpy, kernels.gmm_eps_numba, (z, means, variances, log_w, 0.3)

    xi = rng.standard_normal((2048, 21, 8))
    yield "ar1_unit (2048x21x8)", kernels.ar1_unit_numpy, kernels.ar1_unit_numba, (xi, 0.75)

    S = 21
    r = np.r_[1.0, rng.uniform(1.0, 1.2, S - 1)]
    c = np.r_[0.0, -rng.uniform(0.01, 0.2, S - 1)]
    e = 0.1 * rng.standard_normal((2048, S, 8))
    yield "error_deltas (2048x21x8)", kernels.error_deltas_numpy, kernels.error_deltas_numba, (z[0], e, r, c)


def _as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; the numba column runs the plain-python loops")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, f_np, f_nb, a in cases(rng):
        for x, y in zip(_as_tuple(f_np(*a)), _as_tuple(f_nb(*a))):
            np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-12)
        t_np = min(timeit.repeat(lambda: f_np(*a), repeat=args.repeat, number=args.number)) / args.number
        t_nb = min(timeit.repeat(lambda: f_nb(*a), repeat=args.repeat, number=args.number)) / args.number
        print(f"{name:<26s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
