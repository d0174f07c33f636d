"""Batch variational EM and stochastic variational inference.

Each outer iteration runs the E-step in the listed coordinate order
(phi, then the theta block, then the beta block, then a final phi
refresh) followed by the M-step over (c, eta, sigma).  The phi/theta
block is iterated to a row-local fixed point; the stochastic path runs
the identical local loop on a mini-batch and then takes a natural
gradient step on the beta block, so a full-batch stochastic step with
unit step size reproduces a batch iteration exactly.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DomainError, NumericalError
from .gammamath import digamma
from .model import (
    SIGMA_FLOOR,
    BetaPosterior,
    RegressionParams,
    Responsibilities,
    ThetaPosterior,
    as_response_vector,
    elbo,
    theta_second_moment_total,
)

log = logging.getLogger(__name__)

__all__ = [
    "SviSchedule",
    "FitConfig",
    "ElboTrace",
    "FitResult",
    "update_phi",
    "update_theta_row",
    "update_beta",
    "mstep_c",
    "mstep_eta",
    "mstep_sigma",
    "learning_rate",
    "svi_step",
    "fit",
]


@dataclass(frozen=True)
class SviSchedule:
    """Step-size schedule rho_t = (t0 + t)^(-kappa) and mini-batch size."""

    t0: float = 64.0
    kappa: float = 0.7
    batch_size: int = 64

    def __post_init__(self):
        if not self.t0 > 0.0:
            raise DomainError("t0 must be strictly positive")
        if not 0.5 < self.kappa <= 1.0:
            raise DomainError("kappa must lie in (0.5, 1]")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise DomainError("batch_size must be a positive integer")


@dataclass(frozen=True)
class FitConfig:
    """Settings for the fitting loop.

    mode "batch" stops on a relative ELBO change below rel_tol; mode
    "svi" runs max_iters epochs of mini-batch steps.  local_tol and
    local_max_iters bound the row-local phi/theta fixed-point loop.
    paper_moment switches the second-moment formula used in the
    regression M-step and the Gaussian ELBO term.
    """

    max_iters: int = 200
    rel_tol: float = 1e-6
    mode: str = "batch"
    schedule: SviSchedule | None = None
    eval_every: int = 1
    local_tol: float = 1e-6
    local_max_iters: int = 100
    paper_moment: bool = False

    def __post_init__(self):
        if self.max_iters < 0:
            raise DomainError("max_iters must be nonnegative")
        if not self.rel_tol > 0.0:
            raise DomainError("rel_tol must be strictly positive")
        if self.mode not in ("batch", "svi"):
            raise DomainError("mode must be 'batch' or 'svi'")
        if self.mode == "svi" and self.schedule is None:
            raise DomainError("svi mode requires a schedule")
        if self.eval_every < 1:
            raise DomainError("eval_every must be a positive integer")
        if not self.local_tol > 0.0 or self.local_max_iters < 1:
            raise DomainError("invalid local-loop settings")


@dataclass
class ElboTrace:
    """Objective values recorded at evaluation boundaries."""

    iterations: list = field(default_factory=list)
    elapsed_ms: list = field(default_factory=list)
    elbos: list = field(default_factory=list)

    def append(self, iteration, elapsed, value):
        self.iterations.append(int(iteration))
        self.elapsed_ms.append(float(elapsed))
        self.elbos.append(float(value))

    def __len__(self):
        return len(self.elbos)

    def csv_lines(self):
        lines = ["iter,elapsed_ms,elbo"]
        for i, ms, v in zip(self.iterations, self.elapsed_ms, self.elbos):
            lines.append(f"{i},{ms!r},{v!r}")
        return lines

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.csv_lines()) + "\n")


@dataclass
class FitResult:
    theta: ThetaPosterior
    beta: BetaPosterior
    regression: RegressionParams
    responsibilities: Responsibilities
    trace: ElboTrace
    iterations: int
    converged: bool


def update_phi(i, d, theta_post, beta_post):
    """Responsibility vector for one stored nonzero (i, d).

    Softmax over factors of E[ln theta_ik] + E[ln beta_kd], computed with
    max subtraction; exact ties come out as equal responsibilities.
    """
    s = (
        digamma(theta_post.gamma[i]) - np.log(theta_post.chi[i])
        + digamma(beta_post.nu[:, d]) - np.log(beta_post.lam[:, d])
    )
    s -= s.max()
    p = np.exp(s)
    return p / p.sum()


def _phi_for_entries(rows, cols, elog_theta, elog_beta):
    """Vectorized softmax responsibilities for entry index arrays."""
    s = elog_theta[rows] + elog_beta[:, cols].T
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return p


def update_theta_row(i, data, resp, beta_post, config, c):
    """One theta-block coordinate update for row i.

    gamma_ik = a + sum over stored nonzeros of x_id phi_idk;
    chi_ik = a*c + sum over ALL columns of E[beta_kd].
    """
    sl = data.row_slice(i)
    k = beta_post.n_factors
    gamma_row = np.full(k, config.a, dtype=np.float64)
    if sl.stop > sl.start:
        gamma_row = config.a + (
            data.counts[sl, None] * resp.phi[sl]
        ).sum(axis=0)
    chi_row = config.a * c + beta_post.mean.sum(axis=1)
    return gamma_row, chi_row


def _segment_sum(weights, segment_ids, n_segments):
    """Sum (n, K) weights into (n_segments, K) buckets; deterministic order."""
    k = weights.shape[1]
    out = np.empty((n_segments, k), dtype=np.float64)
    for j in range(k):
        out[:, j] = np.bincount(segment_ids, weights=weights[:, j], minlength=n_segments)
    return out


def update_beta(data, resp, theta_post, config):
    """Beta-block coordinate update from current responsibilities and theta.

    nu_kd = b + sum over stored nonzeros of x_id phi_idk; lam_kd = b +
    sum_i E[theta_ik], which is constant across d and computed once per
    factor.
    """
    b = config.b
    k = theta_post.n_factors
    d = data.n_cols
    xphi = data.counts[:, None] * resp.phi
    nu = b + _segment_sum(xphi, data.cols, d).T
    lam_col = b + theta_post.mean.sum(axis=0)
    lam = np.repeat(lam_col[:, None], d, axis=1)
    return BetaPosterior(nu, lam)


def mstep_c(theta_post):
    """Prior-scale update: c = N K / sum_ik E[theta_ik]."""
    total = float(theta_post.mean.sum())
    n, k = theta_post.gamma.shape
    if n * k == 0 or total <= 0.0:
        raise NumericalError("cannot update c from an empty or degenerate theta posterior")
    return n * k / total


def mstep_eta(theta_post, y, paper_moment=False, a=None, c=None):
    """Response-weight update: solve sum_i E[theta_i theta_i^T] eta = E[theta]^T y."""
    m_total = theta_second_moment_total(theta_post, paper_moment, a, c)
    rhs = theta_post.mean.T @ y
    try:
        cho = scipy.linalg.cho_factor(m_total, lower=True)
    except scipy.linalg.LinAlgError as exc:
        mode = "paper-faithful" if paper_moment else "default"
        raise NumericalError(
            f"second-moment matrix not positive definite in {mode} mode"
        ) from exc
    return scipy.linalg.cho_solve(cho, rhs)


def mstep_sigma(theta_post, y, eta):
    """Response-variance update: (y.y - y.E[theta] eta) / N, floored at 1e-12."""
    n = y.shape[0]
    value = float(y @ y - y @ (theta_post.mean @ eta)) / n
    if value < -1e-8:
        raise NumericalError(
            f"sigma update produced {value:.3e}; inconsistent eta/theta state"
        )
    return max(value, SIGMA_FLOOR)


def learning_rate(t, schedule):
    """Natural-gradient step size rho_t = (t0 + t)^(-kappa)."""
    if t < 0:
        raise DomainError("iteration index must be nonnegative")
    return float((schedule.t0 + t) ** (-schedule.kappa))


def natural_gradient_blend(current, target, rho):
    """Interpolated global update (1 - rho) * current + rho * target.

    rho = 1 lands exactly on the target; rho = 0 leaves the current
    values untouched.
    """
    if not 0.0 <= rho <= 1.0:
        raise DomainError("rho must lie in [0, 1]")
    if rho == 0.0:
        return np.array(current, dtype=np.float64)
    return (1.0 - rho) * np.asarray(current) + rho * np.asarray(target)


def _local_loop(data, row_idx, gamma, chi, beta_post, a, c, tol, max_iters):
    """Iterate [phi update; theta-row update] on the given rows to a fixed point.

    gamma/chi are the incoming values for those rows ((n_local, K)).  chi
    does not change after the first pass (it depends only on beta and c),
    so convergence is checked on gamma.  Returns the final gamma, chi,
    responsibilities for the rows' entries in data order, the entry ids,
    and the number of passes run.

    Hot path: everything runs in transposed (K, n) layout, and the
    softmax is evaluated in factored form exp(elt) * exp(elb) with the
    theta side shifted by its per-row maximum and the beta side by its
    per-entry maximum.  With integer counts the shifted exponents are
    bounded far away from underflow; a log-space fallback still covers
    adversarial caller-supplied states.
    """
    entry_ids, local_rows = data.entry_ids_for_rows(row_idx)
    k = gamma.shape[1]
    n_local = row_idx.size
    n_ent = entry_ids.size
    counts = data.counts[entry_ids].astype(np.float64)
    elb_t = beta_post.mean_log[:, data.cols[entry_ids]]
    elb_shift = elb_t.max(axis=0) if n_ent else np.zeros(0)
    elb_t = elb_t - elb_shift
    eb_t = np.exp(elb_t)
    chi_target = a * c + beta_post.mean.sum(axis=1)
    log_chi_target = np.log(chi_target)[:, None]

    # Contiguous per-row segments in gathered entry order, skipping empty rows.
    seg_bounds = np.flatnonzero(np.diff(local_rows, prepend=-1))
    seg_rows = local_rows[seg_bounds] if n_ent else np.zeros(0, dtype=np.int64)

    gamma_t = np.array(gamma.T, dtype=np.float64, order="C")
    log_chi = np.log(chi).T
    w_t = np.empty((k, n_local))
    row_shift = np.empty(n_local)
    s_t = np.empty((k, n_ent))
    xphi_t = np.empty((k, n_ent))
    denom = np.empty(n_ent)
    gamma_new = np.empty_like(gamma_t)
    passes = 0
    for m in range(max_iters):
        passes = m + 1
        elt = digamma(gamma_t)
        elt -= log_chi
        if n_local:
            np.max(elt, axis=0, out=row_shift)
            elt -= row_shift
        np.exp(elt, out=w_t)
        np.take(w_t, local_rows, axis=1, out=s_t)
        s_t *= eb_t
        np.sum(s_t, axis=0, out=denom)
        if n_ent and not denom.all():
            # Adversarial magnitudes: redo this pass's phi in log space.
            np.take(elt, local_rows, axis=1, out=s_t)
            s_t += elb_t
            s_t -= s_t.max(axis=0)
            np.exp(s_t, out=s_t)
            np.sum(s_t, axis=0, out=denom)
        s_t /= denom
        np.multiply(s_t, counts, out=xphi_t)
        gamma_new.fill(a)
        if n_ent:
            gamma_new[:, seg_rows] += np.add.reduceat(xphi_t, seg_bounds, axis=1)
        log_chi = log_chi_target
        if n_local == 0:
            gamma_t, gamma_new = gamma_new, gamma_t
            break
        rel = float(np.max(np.abs(gamma_new - gamma_t) / gamma_t))
        gamma_t, gamma_new = gamma_new, gamma_t
        if rel < tol:
            break
    gamma = np.ascontiguousarray(gamma_t.T)
    chi = np.ascontiguousarray(np.broadcast_to(chi_target, gamma.shape))
    phi = np.ascontiguousarray(s_t.T)
    return gamma, chi, phi, entry_ids, passes


def _init_state(data, y, mcfg, rng):
    """Seeded initialization: shapes get uniform jitter, rates start at the prior."""
    n, d, k = data.n_rows, data.n_cols, mcfg.n_factors
    a, b = mcfg.a, mcfg.b
    gamma = a + rng.uniform(0.0, 0.1 * a, size=(n, k))
    nu = b + rng.uniform(0.0, 0.1 * b, size=(k, d))
    chi = np.full((n, k), a, dtype=np.float64)
    lam = np.full((k, d), b, dtype=np.float64)
    eta = np.zeros(k)
    sigma = max(float(np.var(y)), SIGMA_FLOOR) if y is not None else 1.0
    theta = ThetaPosterior(gamma, chi)
    beta = BetaPosterior(nu, lam)
    reg = RegressionParams(eta, sigma, 1.0)
    return theta, beta, reg


def _refresh_phi(data, theta_post, beta_post):
    phi = _phi_for_entries(data.rows, data.cols, theta_post.mean_log, beta_post.mean_log)
    return Responsibilities(phi)


def _mstep(theta_post, y, reg, fcfg, mcfg):
    c = mstep_c(theta_post)
    if y is None:
        return RegressionParams(reg.eta, reg.sigma, c)
    eta = mstep_eta(theta_post, y, fcfg.paper_moment, mcfg.a, c)
    sigma = mstep_sigma(theta_post, y, eta)
    return RegressionParams(eta, sigma, c)


def _first_nonfinite_block(named_arrays):
    for name, arr in named_arrays:
        if not np.all(np.isfinite(arr)):
            return name
    return None


def _check_finite(it, theta, beta, resp, reg, value):
    bad = _first_nonfinite_block(
        [
            ("phi", resp.phi),
            ("gamma", theta.gamma),
            ("chi", theta.chi),
            ("nu", beta.nu),
            ("lambda", beta.lam),
            ("c", np.asarray(reg.c)),
            ("eta", reg.eta),
            ("sigma", np.asarray(reg.sigma)),
            ("elbo", np.asarray(value)),
        ]
    )
    if bad is not None:
        raise NumericalError(f"non-finite values in parameter block '{bad}' at iteration {it}")


def svi_step(data, y, theta, beta, reg, batch, t, schedule, mcfg, fcfg):
    """One stochastic step: local fixed point on the batch, then global updates.

    The beta-block parameters move toward the N/|B|-scaled batch statistics
    with weight rho_t; c, eta, sigma are recomputed from the batch rows
    alone with |B| in place of N.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise DomainError("mini-batch must be non-empty")
    if batch.min() < 0 or batch.max() >= data.n_rows:
        raise DomainError("mini-batch contains out-of-range rows")
    n, d = data.n_rows, data.n_cols
    scale = n / batch.size
    g_loc, chi_loc, phi_loc, entry_ids, _ = _local_loop(
        data, batch, theta.gamma[batch], theta.chi[batch], beta, mcfg.a, reg.c,
        fcfg.local_tol, fcfg.local_max_iters,
    )
    gamma = theta.gamma.copy()
    chi = theta.chi.copy()
    gamma[batch] = g_loc
    chi[batch] = chi_loc
    theta_new = ThetaPosterior(gamma, chi)
    theta_batch = ThetaPosterior(g_loc, chi_loc)

    xphi = data.counts[entry_ids].astype(np.float64)[:, None] * phi_loc
    nu_hat = mcfg.b + scale * _segment_sum(xphi, data.cols[entry_ids], d).T
    lam_hat_col = mcfg.b + scale * theta_batch.mean.sum(axis=0)
    lam_hat = np.repeat(lam_hat_col[:, None], d, axis=1)
    rho = learning_rate(t, schedule)
    nu = natural_gradient_blend(beta.nu, nu_hat, rho)
    lam = natural_gradient_blend(beta.lam, lam_hat, rho)
    beta_new = BetaPosterior(nu, lam)

    c = mstep_c(theta_batch)
    if y is None:
        reg_new = RegressionParams(reg.eta, reg.sigma, c)
    else:
        yb = y[batch]
        eta = mstep_eta(theta_batch, yb, fcfg.paper_moment, mcfg.a, c)
        sigma = mstep_sigma(theta_batch, yb, eta)
        reg_new = RegressionParams(eta, sigma, c)
    return theta_new, beta_new, reg_new


def _fit_batch(data, y, mcfg, fcfg, theta, beta, reg, callback, t_start):
    trace = ElboTrace()
    all_rows = np.arange(data.n_rows, dtype=np.int64)
    prev = None
    converged = False
    iterations = 0
    resp = None
    for it in range(1, fcfg.max_iters + 1):
        iterations = it
        gamma, chi, phi, _, _ = _local_loop(
            data, all_rows, theta.gamma, theta.chi, beta, mcfg.a, reg.c,
            fcfg.local_tol, fcfg.local_max_iters,
        )
        theta = ThetaPosterior(gamma, chi)
        beta = update_beta(data, Responsibilities(phi), theta, mcfg)
        resp = _refresh_phi(data, theta, beta)
        reg = _mstep(theta, y, reg, fcfg, mcfg)
        if it % fcfg.eval_every == 0:
            value = _safe_elbo(data, y, theta, beta, resp, reg, mcfg, fcfg, it)
            elapsed = (time.perf_counter() - t_start) * 1000.0
            trace.append(it, elapsed, value)
            if callback is not None:
                callback(it, elapsed, value)
            if prev is not None and abs(value - prev) < fcfg.rel_tol * abs(value):
                converged = True
                break
            prev = value
    return FitResult(theta, beta, reg, resp, trace, iterations, converged)


def _safe_elbo(data, y, theta, beta, resp, reg, mcfg, fcfg, it):
    try:
        value = elbo(data, y, theta, beta, resp, reg, mcfg, fcfg.paper_moment)
    except NumericalError:
        value = np.nan
    _check_finite(it, theta, beta, resp, reg, value)
    return value


def _fit_svi(data, y, mcfg, fcfg, theta, beta, reg, callback, t_start, rng):
    trace = ElboTrace()
    sched = fcfg.schedule
    n = data.n_rows
    batch_size = min(sched.batch_size, n)
    all_rows = np.arange(n, dtype=np.int64)
    t_step = 0
    epoch = 0

    def refresh_locals(ep):
        """Full-data local fixed point under the current globals, for evaluation."""
        g, chi, _, _, _ = _local_loop(
            data, all_rows, theta.gamma, theta.chi, beta, mcfg.a, reg.c,
            fcfg.local_tol, fcfg.local_max_iters,
        )
        th = ThetaPosterior(g, chi)
        rs = _refresh_phi(data, th, beta)
        value = _safe_elbo(data, y, th, beta, rs, reg, mcfg, fcfg, ep)
        return th, rs, value

    th_eval = resp_eval = None
    last_evaluated = -1
    for epoch in range(1, fcfg.max_iters + 1):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = perm[start : start + batch_size]
            theta, beta, reg = svi_step(
                data, y, theta, beta, reg, batch, t_step, sched, mcfg, fcfg
            )
            t_step += 1
        if epoch % fcfg.eval_every == 0:
            th_eval, resp_eval, value = refresh_locals(epoch)
            elapsed = (time.perf_counter() - t_start) * 1000.0
            trace.append(epoch, elapsed, value)
            if callback is not None:
                callback(epoch, elapsed, value)
            last_evaluated = epoch
    if last_evaluated != fcfg.max_iters:
        th_eval, resp_eval, _ = refresh_locals(fcfg.max_iters)
    return FitResult(th_eval, beta, reg, resp_eval, trace, epoch, False)


def fit(data, y, model_config, fit_config=None, seed=None, callback=None):
    """Fit the model by batch variational EM or stochastic variational inference.

    Parameters
    ----------
    data : CountMatrix
    y : array of shape (N,) or None
        Optional responses; without them the regression block is left at
        its initialization and the Gaussian term is dropped from the
        objective.
    model_config : ModelConfig
    fit_config : FitConfig
    seed : int, optional
        Overrides model_config.seed for initialization jitter and batch
        shuffling.
    callback : callable, optional
        Called as callback(iteration, elapsed_ms, elbo) at evaluation
        boundaries.
    """
    if fit_config is None:
        fit_config = FitConfig()
    if y is not None:
        y = as_response_vector(y, data.n_rows)
    if data.n_rows < 1 or data.n_cols < 1:
        raise DomainError("fit requires at least one row and one column")
    rng = np.random.default_rng(model_config.seed if seed is None else seed)

    zero_rows = int(np.sum(np.diff(data.row_ptr) == 0))
    zero_cols = data.n_cols - np.unique(data.cols).size
    if zero_rows or zero_cols:
        log.info("fitting with %d all-zero rows and %d all-zero columns", zero_rows, zero_cols)

    theta, beta, reg = _init_state(data, y, model_config, rng)
    t_start = time.perf_counter()
    if fit_config.max_iters == 0:
        resp = _refresh_phi(data, theta, beta)
        return FitResult(theta, beta, reg, resp, ElboTrace(), 0, False)
    if fit_config.mode == "batch":
        return _fit_batch(data, y, model_config, fit_config, theta, beta, reg, callback, t_start)
    return _fit_svi(data, y, model_config, fit_config, theta, beta, reg, callback, t_start, rng)
