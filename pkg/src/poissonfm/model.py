"""Model state containers, the generative sampler, and the variational objective.

The model: each row i carries K positive factor weights theta_ik with a
Gamma(a, a*c) prior, each column d carries loadings beta_kd with a
Gamma(b, b) prior, counts are Poisson with rate sum_k theta_ik beta_kd,
and an optional scalar response per row is Gaussian with mean
theta_i . eta and variance sigma.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import DomainError, NumericalError
from .gammamath import digamma, gamma_entropy, gamma_mean, log_factorial

__all__ = [
    "ModelConfig",
    "CountMatrix",
    "ThetaPosterior",
    "BetaPosterior",
    "Responsibilities",
    "RegressionParams",
    "as_response_vector",
    "poisson_rate",
    "rate_matrix",
    "sample_dataset",
    "theta_second_moment",
    "theta_second_moment_total",
    "elbo",
]

PHI_SUM_TOL = 1e-10
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    """Fixed hyperparameters of the generative model.

    Parameters
    ----------
    n_factors : int
        Number of latent factors K.
    a : float
        Shape of the Gamma prior on factor weights theta.
    b : float
        Shape and rate of the Gamma prior on loadings beta.
    seed : int
        Seed for all randomized operations tied to this model.
    """

    n_factors: int
    a: float = 0.3
    b: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if int(self.n_factors) != self.n_factors or self.n_factors < 1:
            raise DomainError("n_factors must be a positive integer")
        if not (self.a > 0.0 and np.isfinite(self.a)):
            raise DomainError("a must be strictly positive and finite")
        if not (self.b > 0.0 and np.isfinite(self.b)):
            raise DomainError("b must be strictly positive and finite")
        if int(self.seed) != self.seed or not (0 <= self.seed < 2**64):
            raise DomainError("seed must be a 64-bit unsigned integer")


def _as_index_array(values, name):
    arr = np.asarray(values)
    if arr.size == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise DomainError(f"{name} must be integers")
    return arr.astype(np.int64)


@dataclass(frozen=True)
class CountMatrix:
    """Sparse N x D matrix of nonnegative integer counts.

    Only strictly positive counts are stored; absent cells are exact
    zeros.  Entries are kept sorted in row-major order, which gives
    CSR-style row slicing through `row_ptr`.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    counts: np.ndarray
    row_ptr: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_rows < 0 or self.n_cols < 0:
            raise DomainError("matrix dimensions must be nonnegative")
        rows = _as_index_array(self.rows, "row indices")
        cols = _as_index_array(self.cols, "column indices")
        counts = _as_index_array(self.counts, "counts")
        if not (rows.shape == cols.shape == counts.shape) or rows.ndim != 1:
            raise DomainError("rows, cols, counts must be 1-D arrays of equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.n_rows:
                raise DomainError("row index out of range")
            if cols.min() < 0 or cols.max() >= self.n_cols:
                raise DomainError("column index out of range")
            if counts.min() < 1:
                raise DomainError("stored counts must be >= 1")
        order = np.lexsort((cols, rows))
        rows, cols, counts = rows[order], cols[order], counts[order]
        if rows.size > 1:
            same = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if same.any():
                k = int(np.flatnonzero(same)[0])
                raise DomainError(
                    f"duplicate entry at (row {rows[k]}, col {cols[k]})"
                )
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "counts", counts)
        ptr = np.zeros(self.n_rows + 1, dtype=np.int64)
        if rows.size:
            np.cumsum(np.bincount(rows, minlength=self.n_rows), out=ptr[1:])
        object.__setattr__(self, "row_ptr", ptr)

    @property
    def nnz(self):
        return int(self.counts.size)

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense)
        rows, cols = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], rows, cols, dense[rows, cols])

    def to_dense(self):
        out = np.zeros((self.n_rows, self.n_cols), dtype=np.int64)
        out[self.rows, self.cols] = self.counts
        return out

    def row_slice(self, i):
        """Slice into the entry arrays covering row i."""
        if not 0 <= i < self.n_rows:
            raise IndexError(f"row {i} out of range for {self.n_rows} rows")
        return slice(int(self.row_ptr[i]), int(self.row_ptr[i + 1]))

    def entry_ids_for_rows(self, row_idx):
        """Entry indices of the given rows, plus a local row id per entry.

        Returns (entry_ids, local_rows) where local_rows[j] is the
        position within `row_idx` of the row owning entry entry_ids[j].
        """
        row_idx = _as_index_array(row_idx, "row indices")
        starts = self.row_ptr[row_idx]
        lens = self.row_ptr[row_idx + 1] - starts
        total = int(lens.sum())
        offsets = np.concatenate(([0], np.cumsum(lens)[:-1])) if lens.size else lens
        entry_ids = np.repeat(starts - offsets, lens) + np.arange(total, dtype=np.int64)
        local_rows = np.repeat(np.arange(row_idx.size, dtype=np.int64), lens)
        return entry_ids, local_rows


def as_response_vector(values, n_rows):
    """Validate a length-N response vector and return it as float64."""
    y = np.asarray(values, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != n_rows:
        raise DomainError(f"response vector must have length {n_rows}")
    if y.size and not np.all(np.isfinite(y)):
        raise DomainError("response vector must be finite")
    return y


def _check_gamma_params(shape_arr, rate_arr, what):
    s = np.asarray(shape_arr, dtype=np.float64)
    r = np.asarray(rate_arr, dtype=np.float64)
    if s.ndim != 2 or s.shape != r.shape:
        raise DomainError(f"{what} shape/rate arrays must be 2-D with equal shape")
    for name, arr in (("shape", s), ("rate", r)):
        if arr.size and not (np.all(arr > 0.0) and np.all(np.isfinite(arr))):
            raise DomainError(f"{what} {name} parameters must be positive and finite")
    return s, r


@dataclass(frozen=True)
class ThetaPosterior:
    """Variational Gamma posterior over factor weights: q(theta_ik) = Gamma(gamma_ik, chi_ik)."""

    gamma: np.ndarray
    chi: np.ndarray

    def __post_init__(self):
        g, c = _check_gamma_params(self.gamma, self.chi, "theta posterior")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "chi", c)

    @property
    def n_rows(self):
        return self.gamma.shape[0]

    @property
    def n_factors(self):
        return self.gamma.shape[1]

    @property
    def mean(self):
        return self.gamma / self.chi

    @property
    def mean_log(self):
        return digamma(self.gamma) - np.log(self.chi)

    @property
    def variance(self):
        return self.gamma / self.chi**2

    def rows(self, idx):
        return ThetaPosterior(self.gamma[idx], self.chi[idx])


@dataclass(frozen=True)
class BetaPosterior:
    """Variational Gamma posterior over loadings: q(beta_kd) = Gamma(nu_kd, lam_kd)."""

    nu: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        n, l = _check_gamma_params(self.nu, self.lam, "beta posterior")
        object.__setattr__(self, "nu", n)
        object.__setattr__(self, "lam", l)

    @property
    def n_factors(self):
        return self.nu.shape[0]

    @property
    def n_cols(self):
        return self.nu.shape[1]

    @property
    def mean(self):
        return self.nu / self.lam

    @property
    def mean_log(self):
        return digamma(self.nu) - np.log(self.lam)


@dataclass(frozen=True)
class Responsibilities:
    """Per-nonzero allocation of counts across factors.

    phi has one row per stored entry of the CountMatrix, in the same
    order; each row is a length-K simplex vector.  The auxiliary
    per-factor counts are never materialized: their posterior mean for
    entry (i, d) is counts[i, d] * phi[entry, k].
    """

    phi: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.phi, dtype=np.float64)
        if p.ndim != 2:
            raise DomainError("phi must be a 2-D (nnz, K) array")
        if p.size:
            if not np.all((p >= 0.0) & (p <= 1.0)):
                raise DomainError("phi entries must lie in [0, 1]")
            err = np.abs(p.sum(axis=1) - 1.0)
            if err.max() > PHI_SUM_TOL:
                raise DomainError(
                    f"phi rows must sum to 1 within {PHI_SUM_TOL} (worst {err.max():.3e})"
                )
        object.__setattr__(self, "phi", p)

    @property
    def n_factors(self):
        return self.phi.shape[1]


@dataclass(frozen=True)
class RegressionParams:
    """Response weights eta, response variance sigma, and prior scale c."""

    eta: np.ndarray
    sigma: float
    c: float

    def __post_init__(self):
        e = np.asarray(self.eta, dtype=np.float64)
        if e.ndim != 1:
            raise DomainError("eta must be a 1-D vector")
        if e.size and not np.all(np.isfinite(e)):
            raise DomainError("eta must be finite")
        if not (self.sigma >= 0.0 and np.isfinite(self.sigma)):
            raise DomainError("sigma must be nonnegative and finite")
        if not (self.c > 0.0 and np.isfinite(self.c)):
            raise DomainError("c must be strictly positive and finite")
        object.__setattr__(self, "eta", e)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "c", float(self.c))


def poisson_rate(theta_post, beta_post, i, d):
    """Posterior-mean Poisson rate sum_k E[theta_ik] E[beta_kd] for cell (i, d)."""
    if not 0 <= i < theta_post.n_rows:
        raise IndexError(f"row {i} out of range for {theta_post.n_rows} rows")
    if not 0 <= d < beta_post.n_cols:
        raise IndexError(f"column {d} out of range for {beta_post.n_cols} columns")
    et = gamma_mean(theta_post.gamma[i], theta_post.chi[i])
    eb = gamma_mean(beta_post.nu[:, d], beta_post.lam[:, d])
    return float(et @ eb)


def rate_matrix(theta_post, beta_post):
    """Full N x D matrix of posterior-mean Poisson rates."""
    return theta_post.mean @ beta_post.mean


def sample_dataset(config, n_rows, n_cols, c, eta, sigma, seed=None):
    """Draw a dataset from the generative process.

    theta_ik ~ Gamma(a, a*c), beta_kd ~ Gamma(b, b),
    x_id ~ Poisson(sum_k theta_ik beta_kd), y_i ~ Normal(theta_i . eta, sigma),
    with sigma a variance.  Zero counts are not stored.  Deterministic for
    a fixed seed and dimension tuple.

    Returns
    -------
    (CountMatrix, y, theta, beta) with theta (N, K) and beta (K, D) the
    ground-truth draws.
    """
    if n_rows < 1 or n_cols < 1:
        raise DomainError("n_rows and n_cols must be positive")
    if not c > 0.0:
        raise DomainError("c must be strictly positive")
    if sigma < 0.0:
        raise DomainError("sigma must be nonnegative")
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (config.n_factors,):
        raise DomainError(f"eta must have shape ({config.n_factors},)")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    a, b, k = config.a, config.b, config.n_factors
    theta = rng.gamma(a, 1.0 / (a * c), size=(n_rows, k))
    beta = rng.gamma(b, 1.0 / b, size=(k, n_cols))
    x = rng.poisson(theta @ beta)
    y = theta @ eta + np.sqrt(sigma) * rng.standard_normal(n_rows)
    return CountMatrix.from_dense(x), y, theta, beta


def theta_second_moment(theta_post, i, paper_mode=False, a=None, c=None):
    """Posterior second moment E[theta_i theta_i^T] as a K x K matrix.

    Default mode is the factorized-Gamma moment: the outer product of the
    posterior means plus the posterior variances on the diagonal; the
    result is symmetric positive semidefinite.  Paper mode instead applies
    a 1/K^2 prefactor, keeps mean products off the diagonal, and puts
    1/(a c^2) + mean on the diagonal; it requires the prior parameters
    (a, c) and is not guaranteed positive definite.
    """
    if not 0 <= i < theta_post.n_rows:
        raise IndexError(f"row {i} out of range for {theta_post.n_rows} rows")
    m = theta_post.gamma[i] / theta_post.chi[i]
    if not paper_mode:
        return np.outer(m, m) + np.diag(theta_post.gamma[i] / theta_post.chi[i] ** 2)
    if a is None or c is None:
        raise DomainError("paper-mode second moment requires the prior parameters a and c")
    k = m.size
    out = np.outer(m, m)
    np.fill_diagonal(out, 1.0 / (a * c * c) + m)
    return out / k**2


def theta_second_moment_total(theta_post, paper_mode=False, a=None, c=None):
    """Sum of per-row second moments, sum_i E[theta_i theta_i^T]."""
    m = theta_post.mean
    k = theta_post.n_factors
    if not paper_mode:
        return m.T @ m + np.diag(theta_post.variance.sum(axis=0))
    if a is None or c is None:
        raise DomainError("paper-mode second moment requires the prior parameters a and c")
    out = m.T @ m
    np.fill_diagonal(out, theta_post.n_rows / (a * c * c) + m.sum(axis=0))
    return out / k**2


def _gaussian_term(y, theta_post, reg, paper_mode, a, c):
    sigma = max(reg.sigma, SIGMA_FLOOR)
    m_total = theta_second_moment_total(theta_post, paper_mode, a, c)
    quad = float(y @ y - 2.0 * y @ (theta_post.mean @ reg.eta) + reg.eta @ m_total @ reg.eta)
    n = y.shape[0]
    return -0.5 * n * np.log(2.0 * np.pi * sigma) - quad / (2.0 * sigma)


def elbo(data, y, theta_post, beta_post, resp, reg, config, paper_moment=False):
    """Evidence lower bound of the full model at the given variational state.

    The Poisson rate mass term sums over all N*D cells (computed as a
    K-dimensional dot product of marginal means); the allocation term
    involving phi runs over stored nonzeros only.  Pass y=None to score a
    fit without responses (the Gaussian term is omitted).
    """
    a, b = config.a, config.b
    c = reg.c
    n, k = theta_post.n_rows, theta_post.n_factors
    d = beta_post.n_cols
    if data.n_rows != n or data.n_cols != d or beta_post.n_factors != k:
        raise DomainError("dimension mismatch between data and posterior state")
    if resp.phi.shape != (data.nnz, k):
        raise DomainError("responsibilities must have one row per stored nonzero")

    et, elt = theta_post.mean, theta_post.mean_log
    eb, elb = beta_post.mean, beta_post.mean_log

    total = 0.0
    # Gamma prior cross-entropies under q.
    total += n * k * (a * np.log(a * c) - float(gammaln(a)))
    total += (a - 1.0) * float(elt.sum()) - a * c * float(et.sum())
    total += k * d * (b * np.log(b) - float(gammaln(b)))
    total += (b - 1.0) * float(elb.sum()) - b * float(eb.sum())

    # Poisson likelihood bound. 0 * ln 0 := 0 for zero responsibilities.
    if data.nnz:
        s = elt[data.rows] + elb[:, data.cols].T
        phi = resp.phi
        with np.errstate(divide="ignore", invalid="ignore"):
            inner = np.where(phi > 0.0, phi * (s - np.log(phi)), 0.0)
        total += float((data.counts * inner.sum(axis=1)).sum())
        total -= float(log_factorial(data.counts).sum())
    total -= float(et.sum(axis=0) @ eb.sum(axis=1))

    if y is not None:
        y = as_response_vector(y, n)
        total += _gaussian_term(y, theta_post, reg, paper_moment, a, c)

    total += float(gamma_entropy(theta_post.gamma, theta_post.chi).sum())
    total += float(gamma_entropy(beta_post.nu, beta_post.lam).sum())
    if not np.isfinite(total):
        raise NumericalError("ELBO evaluated to a non-finite value")
    return float(total)
