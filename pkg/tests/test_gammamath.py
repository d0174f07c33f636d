import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import gamma as gamma_dist

from poissonfm import DomainError, digamma, gamma_entropy, gamma_mean, gamma_mean_log
from poissonfm.gammamath import gamma_logpdf, log_factorial

# Reference values computed with mpmath at 50 decimal digits.
PSI_1 = -0.57721566490153286060651209008240243
PSI_HALF = -1.9635100260214234794409763329987556
PSI_7_3_MINUS_LN_2_1 = 1.1758829909086087858850278695584384


class TestDigamma:
    def test_frozen_values(self):
        assert digamma(1.0) == pytest.approx(PSI_1, abs=1e-12)
        assert digamma(0.5) == pytest.approx(PSI_HALF, abs=1e-12)

    def test_against_high_precision_oracle_on_grid(self):
        mpmath = pytest.importorskip("mpmath")
        mpmath.mp.dps = 30
        xs = np.concatenate(
            [
                np.geomspace(1e-5, 1e6, 400),
                np.linspace(0.01, 30.0, 300),
                [0.3, 1.0, 5.999999, 6.0, 6.000001, 123.456],
            ]
        )
        ours = digamma(xs)
        for x, v in zip(xs, ours):
            ref = float(mpmath.digamma(mpmath.mpf(float(x))))
            assert abs(v - ref) <= 1e-10, f"digamma({x}) off by {abs(v - ref)}"

    def test_domain_error(self):
        for bad in (0.0, -1.0, np.nan):
            with pytest.raises(DomainError):
                digamma(bad)
        with pytest.raises(DomainError):
            digamma(np.array([1.0, -2.0]))

    def test_shapes(self):
        assert isinstance(digamma(2.0), float)
        assert digamma(np.ones((3, 2))).shape == (3, 2)


class TestGammaMoments:
    @pytest.mark.parametrize(
        "shape,rate,expected",
        [(2.0, 4.0, 0.5), (1.0, 1.0, 1.0), (3.7, 0.2, 18.5)],
    )
    def test_mean(self, shape, rate, expected):
        assert gamma_mean(shape, rate) == pytest.approx(expected, rel=1e-14)

    def test_mean_log_values(self):
        assert gamma_mean_log(1.0, 1.0) == pytest.approx(PSI_1, abs=1e-11)
        assert gamma_mean_log(0.5, 1.0) == pytest.approx(PSI_HALF, abs=1e-11)
        assert gamma_mean_log(7.3, 2.1) == pytest.approx(
            PSI_7_3_MINUS_LN_2_1, abs=1e-10
        )

    def test_domain_errors(self):
        for fn in (gamma_mean, gamma_mean_log, gamma_entropy):
            with pytest.raises(DomainError):
                fn(0.0, 1.0)
            with pytest.raises(DomainError):
                fn(1.0, -1.0)

    @settings(max_examples=300, deadline=None)
    @given(
        st.floats(min_value=1e-3, max_value=1e5),
        st.floats(min_value=1e-3, max_value=1e5),
    )
    def test_jensen_gap_strict(self, shape, rate):
        # E[ln X] < ln E[X] for every non-degenerate Gamma.
        assert gamma_mean_log(shape, rate) < np.log(gamma_mean(shape, rate))

    @pytest.mark.parametrize("shape,rate", [(0.3, 0.3), (1.0, 2.0), (5.5, 0.7), (40.0, 9.0)])
    def test_mean_log_matches_quadrature(self, shape, rate):
        val, err = quad(
            lambda x: np.log(x) * gamma_dist.pdf(x, shape, scale=1.0 / rate),
            0.0,
            np.inf,
            limit=200,
        )
        assert gamma_mean_log(shape, rate) == pytest.approx(val, abs=max(1e-9, 10 * err))


class TestGammaEntropy:
    @pytest.mark.parametrize("shape,rate", [(0.3, 0.3), (1.0, 1.0), (2.5, 0.4), (12.0, 7.0)])
    def test_matches_quadrature(self, shape, rate):
        def neg_q_log_q(x):
            p = gamma_dist.pdf(x, shape, scale=1.0 / rate)
            return -p * gamma_dist.logpdf(x, shape, scale=1.0 / rate) if p > 0 else 0.0

        val, err = quad(neg_q_log_q, 0.0, np.inf, limit=200)
        assert gamma_entropy(shape, rate) == pytest.approx(val, abs=max(1e-8, 10 * err))

    def test_vectorized(self):
        shapes = np.array([[0.5, 2.0], [3.0, 1.0]])
        rates = np.array([[1.0, 1.0], [2.0, 0.5]])
        out = gamma_entropy(shapes, rates)
        assert out.shape == (2, 2)
        assert out[0, 1] == pytest.approx(gamma_entropy(2.0, 1.0), rel=1e-14)


def test_gamma_logpdf_matches_scipy():
    xs = np.array([0.1, 1.0, 3.7])
    ours = gamma_logpdf(xs, 2.5, 1.5)
    ref = gamma_dist.logpdf(xs, 2.5, scale=1.0 / 1.5)
    np.testing.assert_allclose(ours, ref, rtol=1e-12)


def test_log_factorial():
    np.testing.assert_allclose(
        log_factorial(np.array([0, 1, 2, 5])),
        [0.0, 0.0, np.log(2.0), np.log(120.0)],
        rtol=1e-13,
    )
    # large counts stay finite (no overflow through a naive factorial)
    assert np.isfinite(log_factorial(1e6))
