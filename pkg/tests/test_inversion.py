import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from invlab.dynamics import noise_from_data
from invlab.errors import DivergenceError, EtaSingular, NoConvergence, UnknownMethod
from invlab.inversion import (InversionMethod, PredictionError, ddim_invert_update, explicit_fixed_point,
                              extract_prev_error, fixed_point_invert_step, ife_estimate, ife_invert,
                              ife_invert_step, initial_estimate, invert, naive_ddim_invert_step,
                              no_approx_estimate, oracle_fixed_point, parse_method)
from invlab.models import (ErrorModel, GaussianMixtureModel, GaussianPredictor, GMMPredictor, NoisePredictor,
                           PerturbedPredictor, PointMassPredictor)
from invlab.schedule import NoiseSchedule, StepCoefficients, TimestepGrid, build_schedule, make_grid, step_coefficients

DEFAULT = build_schedule()
GRID = make_grid(DEFAULT, 20, 1)


def gaussian_fixed_point(p, sched, grid, i, z_prev):
    """Closed-form solution of z = a z_prev + b g z for the linear predictor eps = g z."""
    k = step_coefficients(sched, grid, i)
    return k.a * z_prev / (1.0 - k.b * p.gain(grid[i]))


@pytest.fixture
def gmm(rng):
    return GaussianMixtureModel.random(rng, 4)


# --------------------------------------------------------------------------
# method strings
# --------------------------------------------------------------------------

@pytest.mark.parametrize("spec,name,k,tol", [
    ("ddim", "ddim-naive", 0, None),
    ("fp:k=3,tol=1e-6", "fixed-point", 3, 1e-6),
    ("fp:k=2", "fixed-point", 2, None),
    ("ife", "ife", 0, None),
    ("ife-noerr", "ife-no-error-approx", 0, None),
    ("ife-noinit", "ife-no-init", 0, None),
    ("oracle", "oracle", 0, 1e-12),
])
def test_parse_method(spec, name, k, tol):
    m = parse_method(spec)
    assert (m.name, m.extra_iters, m.tol) == (name, k, tol)
    assert parse_method(m.label) == m


def test_parse_method_modes_and_labels():
    m = parse_method("ddim:mode=next-time")
    assert m.eps_time_mode == "next-time" and m.label == "ddim:mode=next-time"
    assert parse_method("fp:k=3,tol=1e-6").label == "fp:k=3,tol=1e-06"
    assert parse_method("oracle:tol=1e-9").label == "oracle:tol=1e-09"


@pytest.mark.parametrize("spec", ["newton", "fp:k=-1", "fp:k=x", "ife:k=2", "fp:tol=0", "ddim:mode=sideways", "fp:k"])
def test_parse_method_rejects(spec):
    with pytest.raises(UnknownMethod):
        parse_method(spec)


def test_method_invariants():
    with pytest.raises(ValueError):
        InversionMethod("fixed-point", extra_iters=-1)
    with pytest.raises(ValueError):
        InversionMethod("fixed-point", tol=0.0)
    with pytest.raises(UnknownMethod):
        InversionMethod("anderson")


# --------------------------------------------------------------------------
# single steps
# --------------------------------------------------------------------------

def test_equal_time_inversion_is_identity(rng):
    k = StepCoefficients.from_alpha_bars(0.6, 0.6, check=False)
    z = rng.standard_normal(3)
    np.testing.assert_allclose(ddim_invert_update(k, z, rng.standard_normal(3)), z, rtol=1e-15)


def test_naive_zero_latent():
    p = GaussianPredictor(DEFAULT, 2.0)
    for mode in ("prev-time", "next-time"):
        np.testing.assert_array_equal(naive_ddim_invert_step(p, DEFAULT, GRID, 3, np.zeros(4), mode), 0.0)


def test_naive_has_gap_to_oracle(rng):
    p = GaussianPredictor(DEFAULT, 0.3)
    z = rng.standard_normal(4)
    for i in (1, 10, 20):
        star = gaussian_fixed_point(p, DEFAULT, GRID, i, z)
        assert np.linalg.norm(naive_ddim_invert_step(p, DEFAULT, GRID, i, z) - star) > 1e-6


def test_naive_uses_one_call(gmm, rng):
    p = GMMPredictor(DEFAULT, gmm)
    naive_ddim_invert_step(p, DEFAULT, GRID, 4, gmm.sample(rng))
    assert p.nfe == 1


def test_fixed_point_zero_extra_is_next_time_naive(gmm, rng):
    z = gmm.sample(rng)
    for i in (1, 7, 20):
        a = fixed_point_invert_step(GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, i, z, extra_iters=0)
        b = naive_ddim_invert_step(GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, i, z, mode="next-time")
        assert a.tobytes() == b.tobytes()


def test_fixed_point_converges_to_oracle(gmm, rng):
    z = gmm.sample(rng)
    for i in (1, 10, 20):
        star = oracle_fixed_point(GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, i, z)
        fp = fixed_point_invert_step(GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, i, z, extra_iters=200, tol=1e-9)
        assert np.max(np.abs(fp - star)) < 1e-8


def test_fixed_point_call_count(gmm, rng):
    z = gmm.sample(rng)
    p = GMMPredictor(DEFAULT, gmm)
    fixed_point_invert_step(p, DEFAULT, GRID, 5, z, extra_iters=3, tol=None)
    assert p.nfe == 4
    q = GMMPredictor(DEFAULT, gmm)
    fixed_point_invert_step(q, DEFAULT, GRID, 5, z, extra_iters=500, tol=1e-6)
    assert 1 <= q.nfe < 501


def traj_residuals(p, g, i, z_prev, n=4):
    k = step_coefficients(DEFAULT, g, i)
    z, res = z_prev, []
    for _ in range(n):
        z_next = ddim_invert_update(k, z_prev, p(z, g[i]))
        res.append(np.max(np.abs(z_next - z)))
        z = z_next
    return res


def test_fixed_point_residuals_contract():
    p = GaussianPredictor(DEFAULT, 1.0)
    g = make_grid(DEFAULT, 50, 1)
    z = np.full(3, 1.7)
    for i in (20, 25, 30):
        traj = invert("fp:k=3", GaussianPredictor(DEFAULT, 1.0), DEFAULT, g, z)
        assert traj.nfe == 4 * g.N
        res = traj_residuals(p, g, i, traj.latents[i - 1])
        assert res[0] > res[1] > res[2]


def test_fixed_point_divergence():
    class Exploding(NoisePredictor):
        def _eps(self, z, t, c):
            with np.errstate(over="ignore"):
                return np.full_like(z, 1e308) * (1.0 + np.abs(z))

    with pytest.raises(DivergenceError):
        fixed_point_invert_step(Exploding(DEFAULT), DEFAULT, GRID, 2, np.ones(2), extra_iters=5, tol=None)


def test_oracle_closed_form_gaussian(rng):
    for var in (0.05, 1.0, 4.0):
        p = GaussianPredictor(DEFAULT, var)
        z = rng.standard_normal(5)
        for i in range(1, GRID.N + 1):
            star = oracle_fixed_point(p, DEFAULT, GRID, i, z, tol=1e-12, max_iters=10_000)
            np.testing.assert_allclose(star, gaussian_fixed_point(p, DEFAULT, GRID, i, z), rtol=0, atol=1e-10)


def test_oracle_origin_and_residual(gmm, rng):
    assert np.all(oracle_fixed_point(GaussianPredictor(DEFAULT), DEFAULT, GRID, 3, np.zeros(2)) == 0.0)
    p = GMMPredictor(DEFAULT, gmm)
    z = gmm.sample(rng)
    star = oracle_fixed_point(p, DEFAULT, GRID, 9, z, tol=1e-12)
    k = step_coefficients(DEFAULT, GRID, 9)
    g = ddim_invert_update(k, z, p(star, GRID[9]))
    # the returned iterate is within tol of its predecessor, so one more application moves it by about tol * contraction
    assert np.max(np.abs(g - star)) <= 1e-12


def test_oracle_no_convergence(gmm, rng):
    with pytest.raises(NoConvergence) as info:
        oracle_fixed_point(GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, 20, gmm.sample(rng), max_iters=1)
    assert info.value.residual > 1e-12


# --------------------------------------------------------------------------
# estimates and error extraction
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    s = NoiseSchedule("linear-beta", [0.95, 0.8, 0.5, 0.3])
    return s, TimestepGrid([1, 2, 3])


def test_initial_estimate_exact_arithmetic(toy, rng):
    s, g = toy
    z0 = rng.standard_normal(3)
    coef = math.sqrt(2.5) - math.sqrt(0.5)
    np.testing.assert_allclose(initial_estimate(s, g, z0), coef * z0, rtol=1e-14)
    np.testing.assert_array_equal(initial_estimate(s, g, np.zeros(3)), 0.0)


def test_initial_estimate_misses_by_neglected_error():
    rng = np.random.default_rng(0)
    g = make_grid(DEFAULT, 50, 1)
    k = step_coefficients(DEFAULT, g, 1)
    for _ in range(10):
        m = GaussianMixtureModel.random(rng, 4)
        z0 = m.sample(rng)
        p = GMMPredictor(DEFAULT, m)
        star = oracle_fixed_point(p, DEFAULT, g, 1, z0)
        e_star = (star - k.sigma * p(star, g[1])) / k.s - z0
        np.testing.assert_allclose(initial_estimate(DEFAULT, g, z0) - star, -k.eta * k.s * e_star, atol=1e-10)


@pytest.mark.parametrize("make", [
    lambda z0: PointMassPredictor(DEFAULT, z0),
    lambda z0: GaussianPredictor(DEFAULT, 4.0),
    lambda z0: GaussianPredictor(DEFAULT, 16.0),
])
def test_initial_estimate_beats_start_point(make):
    """Holds when the data prediction barely shrinks at t_1."""
    rng = np.random.default_rng(0)
    g = make_grid(DEFAULT, 50, 1)
    for _ in range(10):
        z0 = 2.0 * rng.standard_normal(4)
        star = oracle_fixed_point(make(z0), DEFAULT, g, 1, z0)
        assert np.linalg.norm(initial_estimate(DEFAULT, g, z0) - star) < np.linalg.norm(z0 - star)


def test_extract_requires_two_latents(rng):
    with pytest.raises(ValueError):
        extract_prev_error(DEFAULT, GRID, 1, rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(2))


def test_extract_eta_singular(rng):
    flat = NoiseSchedule("linear-beta", [0.9, 0.8, 0.8 - 1e-16, 0.5])
    g = TimestepGrid([0, 1, 2, 3])
    with pytest.raises(EtaSingular):
        extract_prev_error(flat, g, 3, rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(2))


def test_extract_recovers_constant_injected_error(rng):
    x0 = rng.standard_normal(4)
    err = ErrorModel(0.02, 1.0, seed=4)
    e_star = err.sample(0, 0, 4)
    p = PerturbedPredictor(PointMassPredictor(DEFAULT, x0), err, GRID)
    traj = invert("oracle", p, DEFAULT, GRID, x0)
    for i in range(2, GRID.N + 1):
        e = extract_prev_error(DEFAULT, GRID, i, traj.latents[i - 2], traj.latents[i - 1], x0)
        assert e.step_index == i - 1
        np.testing.assert_allclose(e.e, e_star, atol=1e-10)


def test_extract_matches_cached_prediction(gmm, rng):
    z0 = gmm.sample(rng)
    traj = ife_invert(GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, z0)
    for i in range(2, GRID.N + 1):
        e = extract_prev_error(DEFAULT, GRID, i, traj.latents[i - 2], traj.latents[i - 1], z0).e
        np.testing.assert_allclose(e, traj.data_pred[i - 2] - z0, atol=1e-10)
    # low noise: the data prediction is still close to the data point
    assert np.linalg.norm(traj.data_pred[0] - z0) < 0.1


vec = arrays(np.float64, 4, elements=st.floats(-10, 10))


@given(vec, vec, vec, vec, st.integers(2, GRID.N))
def test_extract_inverts_explicit_fixed_point(z0, z_start, e1, e2, i):
    z_prev2 = z_start
    z_prev = explicit_fixed_point(DEFAULT, GRID, i - 1, z_prev2, z0, e1)
    rec = extract_prev_error(DEFAULT, GRID, i, z_prev2, z_prev, z0).e
    k = step_coefficients(DEFAULT, GRID, i - 1)
    scale = (np.abs(z_prev).max() + k.r * np.abs(z_prev2).max()) / abs(k.eta * k.s) + np.abs(z0).max() + 1
    np.testing.assert_allclose(rec, e1, atol=1e-12 * scale)


@given(vec, vec, vec, st.integers(1, GRID.N))
def test_consistency_of_step_and_extraction(z0, z_prev, e, i):
    """Stepping with the eps implied by data prediction z0 + e at the explicit fixed point, then extracting, returns e."""
    k = step_coefficients(DEFAULT, GRID, i)
    z_hat = explicit_fixed_point(DEFAULT, GRID, i, z_prev, z0, e)
    eps = noise_from_data(DEFAULT, z_hat, GRID[i], z0 + e)
    z_i = ddim_invert_update(k, z_prev, eps)
    scale = np.abs(z_hat).max() + np.abs(z0 + e).max() + 1
    np.testing.assert_allclose(z_i, z_hat, atol=1e-12 * scale / k.sigma)
    if i < GRID.N:
        rec = extract_prev_error(DEFAULT, GRID, i + 1, z_prev, z_i, z0).e
        np.testing.assert_allclose(rec, e, atol=1e-12 * scale / abs(k.eta * k.s))


def test_ife_estimate_reductions(rng):
    z0, z_prev, e = rng.standard_normal((3, 4))
    for i in (2, 9, 20):
        true = explicit_fixed_point(DEFAULT, GRID, i, z_prev, z0, e)
        np.testing.assert_array_equal(ife_estimate(DEFAULT, GRID, i, z_prev, z0, PredictionError(e, i - 1)), true)
        zero = ife_estimate(DEFAULT, GRID, i, z_prev, z0, np.zeros(4))
        assert zero.tobytes() == no_approx_estimate(DEFAULT, GRID, i, z_prev, z0).tobytes()
    np.testing.assert_array_equal(no_approx_estimate(DEFAULT, GRID, 3, np.zeros(2), np.zeros(2)), 0.0)


def test_estimate_errors_under_ar1_injection():
    z0 = np.random.default_rng(1).standard_normal(8)
    e = ErrorModel(0.01, 0.9, seed=6).chain(0, GRID.N + 1, 8)
    z_prev = z0
    for i in range(1, GRID.N + 1):
        k = step_coefficients(DEFAULT, GRID, i)
        z_true = explicit_fixed_point(DEFAULT, GRID, i, z_prev, z0, e[i])
        d_na = z_true - no_approx_estimate(DEFAULT, GRID, i, z_prev, z0)
        np.testing.assert_allclose(d_na, k.eta * k.s * e[i], atol=1e-12)
        if i >= 2:
            d_ife = z_true - ife_estimate(DEFAULT, GRID, i, z_prev, z0, e[i - 1])
            np.testing.assert_allclose(np.linalg.norm(d_ife), abs(k.eta) * k.s * np.linalg.norm(e[i] - e[i - 1]),
                                       rtol=1e-10)
        z_prev = z_true


def test_ife_step_at_fixed_point(gmm, rng):
    z = gmm.sample(rng)
    for i in (1, 10, 20):
        p = GMMPredictor(DEFAULT, gmm)
        star = oracle_fixed_point(p, DEFAULT, GRID, i, z)
        p.reset_nfe()
        out = ife_invert_step(p, DEFAULT, GRID, i, star, z)
        assert p.nfe == 1
        np.testing.assert_allclose(out, star, atol=1e-10)


# --------------------------------------------------------------------------
# full inversions
# --------------------------------------------------------------------------

def test_ife_two_step_unroll(gmm, rng):
    g = TimestepGrid(GRID.indices[:3])
    z0 = gmm.sample(rng)
    traj = ife_invert(GMMPredictor(DEFAULT, gmm), DEFAULT, g, z0)
    p = GMMPredictor(DEFAULT, gmm)
    z1 = ife_invert_step(p, DEFAULT, g, 1, initial_estimate(DEFAULT, g, z0), z0)
    e1 = extract_prev_error(DEFAULT, g, 2, z0, z1, z0)
    z2 = ife_invert_step(p, DEFAULT, g, 2, ife_estimate(DEFAULT, g, 2, z1, z0, e1), z1)
    assert traj.latents[1].tobytes() == z1.tobytes()
    assert traj.latents[2].tobytes() == z2.tobytes()


def test_ife_nfe_is_N(gmm, rng):
    g = make_grid(DEFAULT, 50, 1)
    p = GMMPredictor(DEFAULT, gmm)
    traj = ife_invert(p, DEFAULT, g, gmm.sample(rng))
    assert traj.nfe == p.nfe == 50
    assert traj.direction == "inversion" and traj.latents.shape == (51, 4)
    assert traj.diagnostics["estimates"].shape == (50, 4)


@pytest.mark.parametrize("k", [0, 1, 2, 4])
def test_fixed_point_nfe_budget(gmm, rng, k):
    p = GMMPredictor(DEFAULT, gmm)
    traj = invert(f"fp:k={k}", p, DEFAULT, GRID, gmm.sample(rng))
    assert traj.nfe == p.nfe == GRID.N * (1 + k)
    assert np.all(traj.diagnostics["iterations"] == 1 + k)


def test_fixed_point_early_stop_is_reported(gmm, rng):
    p = GMMPredictor(DEFAULT, gmm)
    traj = invert("fp:k=50,tol=1e-6", p, DEFAULT, GRID, gmm.sample(rng))
    assert traj.nfe == p.nfe == traj.diagnostics["iterations"].sum() < GRID.N * 51
    assert traj.diagnostics["method"] == "fp:k=50,tol=1e-06"


def test_invert_ddim_matches_iterated_steps(gmm, rng):
    z0 = gmm.sample(rng)
    for mode in ("prev-time", "next-time"):
        traj = invert(InversionMethod("ddim-naive", eps_time_mode=mode), GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, z0)
        p = GMMPredictor(DEFAULT, gmm)
        z = z0
        for i in range(1, GRID.N + 1):
            z = naive_ddim_invert_step(p, DEFAULT, GRID, i, z, mode)
            assert traj.latents[i].tobytes() == z.tobytes()
        assert traj.nfe == GRID.N


def test_invert_fp0_is_one_g_per_step(gmm, rng):
    z0 = gmm.sample(rng)
    traj = invert("fp:k=0", GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, z0)
    ref = invert("ddim:mode=next-time", GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, z0)
    assert traj.latents.tobytes() == ref.latents.tobytes()


def test_invert_oracle_reference(gmm, rng):
    z0 = gmm.sample(rng)
    p = GMMPredictor(DEFAULT, gmm)
    traj = invert("oracle", p, DEFAULT, GRID, z0)
    assert np.all(traj.diagnostics["residuals"] <= 1e-12)
    for i in range(1, GRID.N + 1):
        k = step_coefficients(DEFAULT, GRID, i)
        g = ddim_invert_update(k, traj.latents[i - 1], GMMPredictor(DEFAULT, gmm)(traj.latents[i], GRID[i]))
        np.testing.assert_allclose(g, traj.latents[i], atol=1e-11)


def test_invert_noinit_first_step_is_ddim(gmm, rng):
    z0 = gmm.sample(rng)
    a = invert("ife-noinit", GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, z0)
    b = naive_ddim_invert_step(GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, 1, z0)
    assert a.latents[1].tobytes() == b.tobytes()
    assert a.nfe == GRID.N


def test_invert_noerr_uses_no_approx_estimates(gmm, rng):
    z0 = gmm.sample(rng)
    traj = invert("ife-noerr", GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, z0)
    for i in range(2, GRID.N + 1):
        np.testing.assert_array_equal(traj.diagnostics["estimates"][i - 1],
                                      no_approx_estimate(DEFAULT, GRID, i, traj.latents[i - 1], z0))


def test_invert_unknown_method(rng):
    with pytest.raises(UnknownMethod):
        invert("renoise", GaussianPredictor(DEFAULT), DEFAULT, GRID, rng.standard_normal(2))


def test_inversions_are_deterministic(gmm, rng):
    z0 = gmm.sample(rng)
    for m in ("ddim", "ife", "fp:k=2", "oracle"):
        a = invert(m, GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, z0)
        b = invert(m, GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, z0)
        assert a.latents.tobytes() == b.latents.tobytes()


def test_cached_data_prediction_consistent(gmm, rng):
    z0 = gmm.sample(rng)
    for m in ("ddim", "ife", "fp:k=1"):
        traj = invert(m, GMMPredictor(DEFAULT, gmm), DEFAULT, GRID, z0)
        for i in range(1, GRID.N + 1):
            k = step_coefficients(DEFAULT, GRID, i)
            np.testing.assert_allclose(traj.data_pred[i - 1], (traj.latents[i] - k.sigma * traj.eps[i - 1]) / k.s,
                                       rtol=1e-13, atol=1e-13)
