"""Experimental deep extension: Gamma layers stacked above the factor weights.

Layer l holds per-instance positive units z_l with a Gamma conditional
whose shape is the layer constant alpha_l and whose rate is
alpha_l / (z_{l+1} . w), so the implied conditional mean of a unit is the
weighted combination of the layer above.  The bottom layer modulates the
factor-weight prior the same way: the theta prior rate becomes
a*c / (z_1 . w).  Weights are Gamma-distributed latents.

Inference is black-box: the layered objective's gradient is estimated
with the score-function estimator (sample from q, weight grad-log-q by
the centered learning signal log p - log q) and applied as a projected
gradient step.  No variance reduction is used; this path is experimental
and off by default.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln

from .errors import DomainError, NumericalError
from .gammamath import digamma, gamma_logpdf

__all__ = [
    "DeepConfig",
    "DeepLayer",
    "DeepStack",
    "link_gamma",
    "init_stack",
    "deep_elbo_estimate",
    "deep_grad_step",
]

PARAM_FLOOR = 1e-6


@dataclass(frozen=True)
class DeepConfig:
    """Layer layout and optimization settings for the deep extension."""

    n_layers: int = 0
    widths: tuple = ()
    alpha: float = 2.0
    weight_shape: float = 2.0
    step_size: float = 1e-3
    n_steps: int = 50
    n_mc_samples: int = 64

    def __post_init__(self):
        if self.n_layers < 0:
            raise DomainError("n_layers must be nonnegative")
        if self.widths and len(self.widths) != self.n_layers:
            raise DomainError("widths must list one width per layer")
        if not (self.alpha > 0.0 and self.weight_shape > 0.0):
            raise DomainError("layer and weight shapes must be strictly positive")


@dataclass(frozen=True)
class DeepLayer:
    """One Gamma layer: per-instance unit posteriors and incoming weights.

    w_shape/w_rate parameterize q over the weights mapping the layer
    above into this one ((width_above, width)); they are None for the top
    layer, whose units keep the fixed Gamma(alpha, alpha) prior.
    """

    width: int
    alpha: float
    z_shape: np.ndarray
    z_rate: np.ndarray
    w_shape: np.ndarray | None
    w_rate: np.ndarray | None


@dataclass(frozen=True)
class DeepStack:
    """Layers ordered bottom to top plus the weights into the factor block."""

    layers: tuple
    bottom_w_shape: np.ndarray
    bottom_w_rate: np.ndarray
    weight_prior_shape: float

    @property
    def n_layers(self):
        return len(self.layers)


def link_gamma(z_upper, w_col, alpha):
    """Gamma natural parameters induced by the layer above.

    Returns (alpha, alpha / (z_upper . w_col)); the implied prior mean of
    the downstream unit is exactly z_upper . w_col.
    """
    z_upper = np.asarray(z_upper, dtype=np.float64)
    w_col = np.asarray(w_col, dtype=np.float64)
    if not alpha > 0.0:
        raise DomainError("layer shape alpha must be strictly positive")
    inner = float(z_upper @ w_col)
    if inner <= 0.0:
        raise DomainError("link requires a strictly positive inner product")
    return float(alpha), alpha / inner


def init_stack(n_rows, n_factors, config, seed):
    """Seeded initialization of all layer and weight variational parameters."""
    if config.n_layers < 1:
        raise DomainError("init_stack requires at least one layer")
    widths = tuple(config.widths) if config.widths else (n_factors,) * config.n_layers
    rng = np.random.default_rng(seed)
    wp = config.weight_shape
    layers = []
    for i, width in enumerate(widths):
        z_shape = config.alpha + rng.uniform(0.0, 0.1 * config.alpha, size=(n_rows, width))
        z_rate = np.full((n_rows, width), config.alpha)
        if i + 1 < len(widths):
            upper = widths[i + 1]
            w_shape = wp + rng.uniform(0.0, 0.1 * wp, size=(upper, width))
            w_rate = np.full((upper, width), wp)
        else:
            w_shape = w_rate = None
        layers.append(
            DeepLayer(width, config.alpha, z_shape, z_rate, w_shape, w_rate)
        )
    bw_shape = wp + rng.uniform(0.0, 0.1 * wp, size=(widths[0], n_factors))
    bw_rate = np.full((widths[0], n_factors), wp)
    return DeepStack(tuple(layers), bw_shape, bw_rate, wp)


def _factor_blocks(stack):
    """Name every variational Gamma factor block as (name, shape, rate)."""
    blocks = []
    for i, layer in enumerate(stack.layers):
        blocks.append((f"layer{i}.z", layer.z_shape, layer.z_rate))
        if layer.w_shape is not None:
            blocks.append((f"layer{i}.w", layer.w_shape, layer.w_rate))
    blocks.append(("bottom.w", stack.bottom_w_shape, stack.bottom_w_rate))
    return blocks


def _sample_signal(stack, rng, elog_theta, e_theta, a, a_times_c):
    """One joint draw from q plus its learning signal log p - log q."""
    draws = {}
    log_q = 0.0
    for name, shape, rate in _factor_blocks(stack):
        v = rng.gamma(shape, 1.0 / rate)
        draws[name] = v
        log_q += float(gamma_logpdf(v, shape, rate).sum())

    log_p = 0.0
    top = stack.layers[-1]
    z_top = draws[f"layer{stack.n_layers - 1}.z"]
    log_p += float(gamma_logpdf(z_top, top.alpha, top.alpha).sum())
    wp = stack.weight_prior_shape
    for i in range(stack.n_layers - 1):
        layer = stack.layers[i]
        z = draws[f"layer{i}.z"]
        z_upper = draws[f"layer{i + 1}.z"]
        w = draws[f"layer{i}.w"]
        log_p += float(gamma_logpdf(w, wp, wp).sum())
        means = z_upper @ w
        rate = layer.alpha / means
        log_p += float(gamma_logpdf(z, layer.alpha, rate).sum())
    bw = draws["bottom.w"]
    log_p += float(gamma_logpdf(bw, wp, wp).sum())
    theta_rate = a_times_c / (draws["layer0.z"] @ bw)
    # Expected factor-weight log prior under the fixed fit, at the sampled rate.
    log_p += float(
        (
            a * np.log(theta_rate)
            - gammaln(a)
            + (a - 1.0) * elog_theta
            - theta_rate * e_theta
        ).sum()
    )
    return draws, log_p - log_q


def _accumulate_scores(stack, draws, signal, grads):
    for name, shape, rate in _factor_blocks(stack):
        v = draws[name]
        d_shape = np.log(rate) - digamma(shape) + np.log(v)
        d_rate = shape / rate - v
        gs, gr = grads[name]
        gs += signal * d_shape
        gr += signal * d_rate


def _mc_pass(stack, theta_post, config, c, n_mc_samples, seed, want_grads):
    elog_theta = theta_post.mean_log
    e_theta = theta_post.mean
    a = config.a
    grads = {
        name: (np.zeros_like(shape), np.zeros_like(rate))
        for name, shape, rate in _factor_blocks(stack)
    }
    streams = np.random.SeedSequence(seed).spawn(n_mc_samples)
    total_signal = 0.0
    for child in streams:
        rng = np.random.default_rng(child)
        draws, signal = _sample_signal(stack, rng, elog_theta, e_theta, a, a * c)
        total_signal += signal
        if want_grads:
            _accumulate_scores(stack, draws, signal, grads)
    mc_elbo = total_signal / n_mc_samples
    if want_grads:
        for name in grads:
            gs, gr = grads[name]
            gs /= n_mc_samples
            gr /= n_mc_samples
    return mc_elbo, grads


def deep_elbo_estimate(stack, theta_post, config, c, n_mc_samples, seed):
    """Monte Carlo estimate of the layered objective at the current q."""
    mc_elbo, _ = _mc_pass(stack, theta_post, config, c, n_mc_samples, seed, False)
    return mc_elbo


def deep_grad_step(stack, theta_post, config, c, step_size, n_mc_samples, seed):
    """One projected score-function gradient step on all layer parameters.

    The factor-weight posterior stays fixed; gradients are averaged over
    per-sample seeded streams and every parameter is floored at 1e-6
    after the step.  Returns (updated stack, MC objective estimate).
    """
    if n_mc_samples < 1:
        raise DomainError("n_mc_samples must be positive")
    mc_elbo, grads = _mc_pass(stack, theta_post, config, c, n_mc_samples, seed, True)
    for name, (gs, gr) in grads.items():
        if not (np.all(np.isfinite(gs)) and np.all(np.isfinite(gr))):
            raise NumericalError(
                f"non-finite gradient estimate in block '{name}'; step rejected"
            )

    def stepped(name, shape, rate):
        gs, gr = grads[name]
        return (
            np.maximum(shape + step_size * gs, PARAM_FLOOR),
            np.maximum(rate + step_size * gr, PARAM_FLOOR),
        )

    new_layers = []
    for i, layer in enumerate(stack.layers):
        z_shape, z_rate = stepped(f"layer{i}.z", layer.z_shape, layer.z_rate)
        if layer.w_shape is not None:
            w_shape, w_rate = stepped(f"layer{i}.w", layer.w_shape, layer.w_rate)
        else:
            w_shape = w_rate = None
        new_layers.append(replace(layer, z_shape=z_shape, z_rate=z_rate,
                                  w_shape=w_shape, w_rate=w_rate))
    bw_shape, bw_rate = stepped("bottom.w", stack.bottom_w_shape, stack.bottom_w_rate)
    new_stack = DeepStack(tuple(new_layers), bw_shape, bw_rate, stack.weight_prior_shape)
    return new_stack, mc_elbo
