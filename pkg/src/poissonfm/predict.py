"""Fold-in inference for new rows, response prediction, and feature queries.

All operations here are read-only against a fitted model: loadings stay
fixed at their variational means and only the query row's factor
posterior is inferred, so any number of queries can run concurrently.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .gammamath import digamma
from .model import ThetaPosterior

__all__ = [
    "Query",
    "QueryResult",
    "FoldInResult",
    "fold_in",
    "predict_response",
    "expected_unobserved",
    "rank_related",
    "run_query",
]

FOLD_IN_TOL = 1e-8
FOLD_IN_MAX_ITERS = 500


@dataclass(frozen=True)
class Query:
    """Observed counts for a new row.

    `cols` lists the observed columns (sorted, unique) and `counts` the
    nonnegative integer counts seen there.  Columns absent from `cols`
    were not observed at all; a full-row query observes every column and
    treats missing entries as explicit zeros.
    """

    n_cols: int
    cols: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        cols = np.asarray(self.cols, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if cols.ndim != 1 or cols.shape != counts.shape:
            raise DomainError("query cols and counts must be 1-D arrays of equal length")
        if cols.size:
            if cols.min() < 0 or cols.max() >= self.n_cols:
                raise DomainError("query column index out of range")
            if np.unique(cols).size != cols.size:
                raise DomainError("query columns must be unique")
            if counts.min() < 0:
                raise DomainError("query counts must be nonnegative")
        order = np.argsort(cols)
        object.__setattr__(self, "cols", cols[order])
        object.__setattr__(self, "counts", counts[order])

    @classmethod
    def full_row(cls, n_cols, cols, counts):
        """A query observing every column; (cols, counts) are the nonzeros."""
        cols = np.asarray(cols, dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        dense = np.zeros(n_cols, dtype=np.int64)
        dense[cols] = counts
        return cls(n_cols, np.arange(n_cols), dense)

    @classmethod
    def from_dense(cls, values):
        values = np.asarray(values, dtype=np.int64)
        return cls(values.size, np.arange(values.size), values)

    @classmethod
    def subset(cls, n_cols, cols, counts):
        """A query observing only the listed columns."""
        q = cls(n_cols, cols, counts)
        if q.cols.size == 0:
            raise DomainError("subset query must observe at least one column")
        return q

    @property
    def unobserved(self):
        mask = np.ones(self.n_cols, dtype=bool)
        mask[self.cols] = False
        return np.flatnonzero(mask)


@dataclass(frozen=True)
class FoldInResult:
    """Factor posterior for a folded-in row."""

    gamma: np.ndarray
    chi: np.ndarray
    iterations: int
    converged: bool
    empty_query: bool = False

    @property
    def mean(self):
        return self.gamma / self.chi

    def as_posterior(self):
        return ThetaPosterior(self.gamma[None, :], self.chi[None, :])


def fold_in(query, beta_post, config, c, tol=FOLD_IN_TOL, max_iters=FOLD_IN_MAX_ITERS):
    """Infer the factor posterior of a query row with loadings held fixed.

    Iterates the responsibility/theta-row updates on the query until the
    relative change in the shape parameters drops below `tol`.  The rate
    parameter's loading mass ranges over the observed columns only, so a
    subset query is shrunk by exactly the evidence it carries.  A query
    with no observed columns returns the prior with `empty_query` set.

    Deterministic: no randomness enters this path.
    """
    k = beta_post.n_factors
    a = config.a
    if query.n_cols != beta_post.n_cols:
        raise DomainError(
            f"query has {query.n_cols} columns, model has {beta_post.n_cols}"
        )
    if query.cols.size == 0:
        return FoldInResult(
            np.full(k, a), np.full(k, a * c), 0, True, empty_query=True
        )
    eb = beta_post.mean[:, query.cols]
    chi = a * c + eb.sum(axis=1)
    pos = query.counts > 0
    if not pos.any():
        return FoldInResult(np.full(k, a), chi, 0, True)
    x = query.counts[pos].astype(np.float64)
    elb = beta_post.mean_log[:, query.cols[pos]].T
    # Deterministic start: split each count uniformly across factors.
    gamma = np.full(k, a + x.sum() / k)
    converged = False
    iterations = 0
    for m in range(max_iters):
        iterations = m + 1
        s = (digamma(gamma) - np.log(chi))[None, :] + elb
        s -= s.max(axis=1, keepdims=True)
        phi = np.exp(s)
        phi /= phi.sum(axis=1, keepdims=True)
        gamma_new = a + (x[:, None] * phi).sum(axis=0)
        rel = float(np.max(np.abs(gamma_new - gamma) / gamma))
        gamma = gamma_new
        if rel < tol:
            converged = True
            break
    return FoldInResult(gamma, chi, iterations, converged)


def predict_response(theta_mean, eta):
    """Predicted response E[theta] . eta."""
    theta_mean = np.asarray(theta_mean, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if theta_mean.shape != eta.shape:
        raise DomainError("theta mean and eta must have the same length")
    return float(theta_mean @ eta)


def expected_unobserved(theta_mean, beta_post, observed_cols):
    """Expected counts at the columns outside the observed subset.

    Returns (unobserved_cols, expected) where expected[j] is
    sum_k E[theta_k] E[beta_k, d_j].
    """
    observed_cols = np.asarray(observed_cols, dtype=np.int64)
    if observed_cols.size and (
        observed_cols.min() < 0 or observed_cols.max() >= beta_post.n_cols
    ):
        raise DomainError("observed column index out of range")
    mask = np.ones(beta_post.n_cols, dtype=bool)
    mask[observed_cols] = False
    comp = np.flatnonzero(mask)
    theta_mean = np.asarray(theta_mean, dtype=np.float64)
    expected = theta_mean @ beta_post.mean[:, comp]
    return comp, expected


def _ranked(indices, scores, top_n):
    order = sorted(range(len(indices)), key=lambda j: (-scores[j], indices[j]))
    return [(int(indices[j]), float(scores[j])) for j in order[:top_n]]


def rank_related(theta_mean, unobserved_cols, expected, training_theta_mean, top_n):
    """Rank unobserved features by expected count and training rows by similarity.

    Instance similarity is the cosine between factor-mean vectors.  Both
    rankings use a stable sort with ties broken by ascending index.
    """
    if top_n < 0:
        raise DomainError("top_n must be nonnegative")
    features = _ranked(unobserved_cols, np.asarray(expected, dtype=np.float64), top_n)
    theta_mean = np.asarray(theta_mean, dtype=np.float64)
    tm = np.asarray(training_theta_mean, dtype=np.float64)
    qnorm = float(np.linalg.norm(theta_mean))
    norms = np.linalg.norm(tm, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(
            (norms > 0.0) & (qnorm > 0.0), tm @ theta_mean / (norms * qnorm), 0.0
        )
    instances = _ranked(np.arange(tm.shape[0]), cos, top_n)
    return features, instances


@dataclass(frozen=True)
class QueryResult:
    """Everything derived from one query against a fitted model."""

    theta_mean: np.ndarray
    predicted_response: float
    unobserved_cols: np.ndarray
    expected_counts: np.ndarray
    top_features: list = field(default_factory=list)
    top_instances: list = field(default_factory=list)
    fold_in_converged: bool = True
    empty_query: bool = False


def run_query(query, theta_post, beta_post, reg, config, top_n=10):
    """Fold in a query and assemble prediction, expectations, and rankings."""
    result = fold_in(query, beta_post, config, reg.c)
    mean = result.mean
    y_hat = predict_response(mean, reg.eta)
    comp, expected = expected_unobserved(mean, beta_post, query.cols)
    features, instances = rank_related(mean, comp, expected, theta_post.mean, top_n)
    return QueryResult(
        theta_mean=mean,
        predicted_response=y_hat,
        unobserved_cols=comp,
        expected_counts=expected,
        top_features=features,
        top_instances=instances,
        fold_in_converged=result.converged,
        empty_query=result.empty_query,
    )
