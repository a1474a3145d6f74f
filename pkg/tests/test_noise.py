import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from mhmap.errors import DomainError, InvalidParameter
from mhmap.noise import Exponential, Gaussian, Laplace, Logistic, Uniform

MODELS = [Gaussian(1.0), Gaussian(0.1), Logistic(0.7), Laplace(1.3), Uniform(-0.5, 2.0), Exponential(1.5)]
mp.mp.dps = 40


def _interior(model, rng, size):
    """Random points inside both supports, within ~8 std of the bulk."""
    if isinstance(model, Uniform):
        return rng.uniform(model.lower, model.upper, size)
    if isinstance(model, Exponential):
        return rng.uniform(2e-2, 8.0 / model.rate, size)
    return rng.uniform(-8.0, 8.0, size) * model.std


def _mp_gauss_nlc(z, r):
    # -ln Phi(z / sqrt r) in high precision
    x = mp.mpf(z) / mp.sqrt(r)
    if x < 0:
        return float(-mp.log(mp.erfc(-x / mp.sqrt(2)) / 2))
    return float(-mp.log1p(-mp.erfc(x / mp.sqrt(2)) / 2))


# --- frozen values ---------------------------------------------------------

def test_cdf_values():
    assert Gaussian(1.0).cdf(0.0) == pytest.approx(0.5)
    assert Gaussian(0.1).cdf(np.inf) == 1.0
    assert Laplace(1.0).cdf(-math.log(2.0)) == pytest.approx(0.25, abs=1e-15)
    # quadrature of the Laplace pdf as an independent check
    q = float(mp.quad(lambda t: 0.5 * mp.e ** (-abs(t)), [-mp.inf, -mp.log(2)]))
    assert q == pytest.approx(0.25, rel=1e-12)


def test_gaussian_log_terms_frozen():
    g = Gaussian(1.0)
    assert g.neg_log_cdf(0.0) == pytest.approx(math.log(2.0), rel=1e-14)
    # -ln Q(38), mpmath at 40 digits
    assert g.neg_log_survival(38.0) == pytest.approx(726.5572160188201, rel=1e-12)
    assert -g.neg_log_cdf(1.0) == pytest.approx(-0.17275377902344989, rel=1e-12)
    assert -g.neg_log_survival(1.0) == pytest.approx(-1.8410216450092635, rel=1e-12)


def test_uniform_log_cdf_midpoint():
    assert Uniform(0.0, 1.0).neg_log_cdf(0.5) == pytest.approx(math.log(2.0), rel=1e-14)


@pytest.mark.parametrize("r", [0.1, 1.0, 4.0])
def test_gaussian_tail_accuracy_vs_mpmath(r):
    s = math.sqrt(r)
    z = np.linspace(-40, 40, 161) * s
    got = Gaussian(r).neg_log_cdf(z)
    ref = np.array([_mp_gauss_nlc(v, r) for v in z])
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-300)
    got_s = Gaussian(r).neg_log_survival(z)
    ref_s = np.array([_mp_gauss_nlc(-v, r) for v in z])
    np.testing.assert_allclose(got_s, ref_s, rtol=1e-10, atol=1e-300)


def test_gaussian_first_derivative_at_zero():
    d1, d2 = Gaussian(1.0).d_neg_log_cdf(0.0)
    assert d1 == pytest.approx(-0.7978845608028654, rel=1e-13)
    assert d2 > 0


def test_logistic_survival_derivative_is_sigmoid():
    d1, _ = Logistic(1.0).d_neg_log_survival(0.0)
    assert d1 == pytest.approx(0.5)


def test_supports():
    for m in (Gaussian(1.0), Logistic(1.0), Laplace(1.0)):
        assert tuple(m.support("cdf")) == (-math.inf, math.inf)
        assert tuple(m.support("survival")) == (-math.inf, math.inf)
        assert not m.bounded
    assert tuple(Uniform(0, 1).support("cdf")) == (0.0, math.inf)
    assert tuple(Uniform(0, 1).support("survival")) == (-math.inf, 1.0)
    assert tuple(Exponential(1.0).support("cdf")) == (0.0, math.inf)
    assert tuple(Exponential(1.0).support("survival")) == (-math.inf, math.inf)
    with pytest.raises(ValueError):
        Gaussian().support("both")


def test_domain_errors():
    with pytest.raises(DomainError):
        Uniform(0, 1).neg_log_cdf(-0.1)
    with pytest.raises(DomainError):
        Uniform(0, 1).d_neg_log_survival(1.0)
    with pytest.raises(DomainError):
        Exponential(2.0).neg_log_cdf(0.0)
    with pytest.raises(DomainError):
        Uniform(0, 1).terms(np.array([0.5, 2.0]), np.array([0, 1]))


def test_invalid_parameters():
    for bad in (lambda: Gaussian(0.0), lambda: Logistic(-1), lambda: Laplace(math.inf),
                lambda: Uniform(1, 1), lambda: Exponential(0)):
        with pytest.raises(InvalidParameter):
            bad()


# --- sampling --------------------------------------------------------------

def test_sampling_is_reproducible():
    a = Gaussian(0.1).sample(np.random.default_rng(7), 20)
    b = Gaussian(0.1).sample(np.random.default_rng(7), 20)
    assert np.array_equal(a, b)


def test_gaussian_sample_mean():
    x = Gaussian(1.0).sample(np.random.default_rng(1), 10**6)
    assert abs(x.mean()) < 0.005


@pytest.mark.parametrize("model", MODELS, ids=lambda m: repr(m))
def test_sample_matches_cdf_ks(model):
    x = np.sort(model.sample(np.random.default_rng(3), 10**5))
    F = model.cdf(x)
    n = x.size
    ks = max(np.max(np.arange(1, n + 1) / n - F), np.max(F - np.arange(n) / n))
    assert ks < 0.01


# --- properties ------------------------------------------------------------

@pytest.mark.parametrize("model", MODELS, ids=lambda m: repr(m))
def test_midpoint_convexity(model, rng):
    a, b = _interior(model, rng, 1000), _interior(model, rng, 1000)
    z1, z2 = np.minimum(a, b), np.maximum(a, b)
    for f in (model.neg_log_cdf, model.neg_log_survival):
        assert np.all(f(0.5 * (z1 + z2)) <= 0.5 * (f(z1) + f(z2)) + 1e-9)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: repr(m))
def test_derivatives_match_central_differences(model, rng):
    h = 1e-5
    z = _interior(model, rng, 1000)
    if isinstance(model, Laplace):
        z = z[np.abs(z) > 10 * h]          # kink of the pdf at 0
    if isinstance(model, Uniform):
        z = z[(z - model.lower > 2e-2) & (model.upper - z > 2e-2)]   # keep h^2/d^2 truncation small
    for f, df in ((model.neg_log_cdf, model.d_neg_log_cdf), (model.neg_log_survival, model.d_neg_log_survival)):
        d1, d2 = df(z)
        fd1 = (f(z + h) - f(z - h)) / (2 * h)
        fd2 = (df(z + h)[0] - df(z - h)[0]) / (2 * h)
        np.testing.assert_allclose(d1, fd1, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(d2, fd2, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: repr(m))
def test_second_derivative_nonnegative(model, rng):
    z = _interior(model, rng, 10**4)
    assert np.all(model.d_neg_log_cdf(z)[1] >= -1e-12)
    assert np.all(model.d_neg_log_survival(z)[1] >= -1e-12)


@pytest.mark.parametrize("model", MODELS[:4], ids=lambda m: repr(m))
def test_probabilities_sum_to_one(model, rng):
    z = _interior(model, rng, 1000)
    total = np.exp(-model.neg_log_cdf(z)) + np.exp(-model.neg_log_survival(z))
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


@given(st.floats(-30, 30), st.floats(-30, 30), st.sampled_from(MODELS[:4]))
def test_cdf_monotone(a, b, model):
    lo, hi = min(a, b), max(a, b)
    assert model.cdf(lo) <= model.cdf(hi)


@given(st.lists(st.floats(-45, 45), min_size=1, max_size=30), st.floats(0.05, 5.0))
def test_gaussian_fused_terms_match_generic(zs, r):
    g = Gaussian(r)
    z = np.array(zs)
    y = (np.arange(z.size) % 2).astype(np.int8)
    fast = g.terms(z, y)
    slow = super(Gaussian, g).terms(z, y)
    for a, b in zip(fast, slow):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-300)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: repr(m))
def test_terms_select_by_bit(model, rng):
    z = _interior(model, rng, 50)
    if isinstance(model, Uniform):
        z = np.clip(z, model.lower + 1e-3, model.upper - 1e-3)
    y = rng.integers(0, 2, 50)
    val, d1, d2 = model.terms(z, y)
    ref = np.where(y == 1, model.neg_log_survival(z), model.neg_log_cdf(z))
    np.testing.assert_allclose(val, ref, rtol=1e-14)
    assert np.all(model.feasible(z, y))
