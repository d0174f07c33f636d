"""Gamma-distribution numerics: digamma, moments, and entropies.

Everything here is elementwise over numpy arrays and accepts scalars.
Shape/rate parameterization throughout: Gamma(s, r) has mean s/r and
variance s/r^2.
"""

import numpy as np
from scipy.special import gammaln

from .errors import DomainError

EULER_MASCHERONI = 0.5772156649015328606065121

# Argument above which the de Moivre series in 1/x^2 is used directly.
# At x = 6 the first dropped term (B_16 / 16 x^16) is below 2e-13.
_ASYMPTOTIC_CUTOFF = 6.0


def digamma(x):
    """Digamma function psi(x) for strictly positive arguments.

    The argument is lifted into the asymptotic regime with six
    applications of the recurrence psi(x) = psi(x + 1) - 1/x (applied
    unconditionally, which keeps the evaluation branch-free and
    vector-friendly), then the de Moivre expansion

        psi(x) ~ ln x - 1/(2x) - sum_n B_{2n} / (2n x^{2n})

    is evaluated at x + 6 >= 6 with Bernoulli terms through 1/x^14,
    where the first dropped term is below 2e-13.  Absolute error is
    below 1e-10 across the working range (up to 1e6); for arguments
    under ~1e-5 the result magnitude ~1/x makes that bar unrepresentable
    in float64.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(arr > 0.0):
        raise DomainError("digamma requires strictly positive arguments")
    acc = 1.0 / arr
    for j in range(1, int(_ASYMPTOTIC_CUTOFF)):
        acc += 1.0 / (arr + j)
    z = arr + _ASYMPTOTIC_CUTOFF
    r = 1.0 / z
    r2 = r * r
    tail = r2 * (
        1.0 / 12.0
        - r2 * (
            1.0 / 120.0
            - r2 * (
                1.0 / 252.0
                - r2 * (
                    1.0 / 240.0
                    - r2 * (
                        1.0 / 132.0
                        - r2 * (691.0 / 32760.0 - r2 * (1.0 / 12.0))
                    )
                )
            )
        )
    )
    out = np.log(z) - 0.5 * r - tail - acc
    if out.ndim == 0:
        return float(out)
    return out


def _check_positive(shape, rate):
    s = np.asarray(shape, dtype=np.float64)
    r = np.asarray(rate, dtype=np.float64)
    if (s.size and not np.all(s > 0.0)) or (r.size and not np.all(r > 0.0)):
        raise DomainError("Gamma shape and rate must be strictly positive")
    return s, r


def gamma_mean(shape, rate):
    """E[X] = shape/rate for X ~ Gamma(shape, rate)."""
    s, r = _check_positive(shape, rate)
    out = s / r
    if out.ndim == 0:
        return float(out)
    return out


def gamma_mean_log(shape, rate):
    """E[ln X] = psi(shape) - ln(rate) for X ~ Gamma(shape, rate)."""
    s, r = _check_positive(shape, rate)
    out = digamma(s) - np.log(r)
    if np.ndim(out) == 0:
        return float(out)
    return out


def gamma_entropy(shape, rate):
    """Differential entropy of Gamma(shape, rate)."""
    s, r = _check_positive(shape, rate)
    out = s - np.log(r) + gammaln(s) + (1.0 - s) * digamma(s)
    if np.ndim(out) == 0:
        return float(out)
    return out


def gamma_logpdf(x, shape, rate):
    """Log density of Gamma(shape, rate) at x > 0."""
    s, r = _check_positive(shape, rate)
    return s * np.log(r) - gammaln(s) + (s - 1.0) * np.log(x) - r * x


def log_factorial(counts):
    """ln(x!) via log-gamma; safe for large counts."""
    return gammaln(np.asarray(counts, dtype=np.float64) + 1.0)
