"""Denoising-diffusion prior over the quantized context.

A small residual network predicts the forward noise; variances are fixed to
the forward posterior values.  The variational bound is evaluated either as
the full sum over steps or with one uniformly sampled step per example
(importance weight T-1), and ancestral sampling ends by rounding through the
discretized Gaussian head onto the context grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import discretized_gaussian_loglik
from .nets import Conv, Module, ResBlock

__all__ = [
    "NoiseSchedule", "DiffusionConfig", "build_schedule", "default_beta_range",
    "forward_marginal", "posterior_params", "Denoiser", "vlb_loss",
    "ancestral_sample", "BETA_CAP",
]

# keeps the rescaled 1000-step endpoints inside (0, 1) at very small T
BETA_CAP = 0.97


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed by t-1 for t = 1..T."""

    betas: np.ndarray

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or b.size < 1:
            raise ValueError("schedule needs at least one step")
        if not (np.all(b > 0.0) and np.all(b < 1.0) and np.all(np.diff(b) >= 0.0)):
            raise ValueError(f"betas must satisfy 0 < b_1 <= ... <= b_T < 1, got {b}")

    @property
    def T(self):
        return self.betas.size

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    @property
    def beta_tildes(self):
        """Forward-posterior variances; the t=1 entry is 0 by convention."""
        ab = self.alpha_bars
        prev = np.concatenate([[1.0], ab[:-1]])
        return (1.0 - prev) / (1.0 - ab) * self.betas

    @property
    def sampler_variances(self):
        """Fixed reverse variances: beta_tilde for t >= 2, beta_1 at t = 1."""
        var = self.beta_tildes.copy()
        var[0] = self.betas[0]
        return var


@dataclass
class DiffusionConfig:
    steps: int = 7
    channels: int = 32
    blocks: int = 3
    beta_start: float | None = None
    beta_end: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"diffusion needs at least one step, got {self.steps}")

    def to_dict(self):
        return {"steps": self.steps, "channels": self.channels,
                "blocks": self.blocks, "beta_start": self.beta_start,
                "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, blob):
        return cls(**blob)


def default_beta_range(T):
    """Standard 1000-step linear endpoints rescaled to T steps, capped < 1."""
    return (min(1e-4 * 1000.0 / T, BETA_CAP), min(0.02 * 1000.0 / T, BETA_CAP))


def build_schedule(T, beta_start=None, beta_end=None):
    if beta_start is None or beta_end is None:
        lo, hi = default_beta_range(T)
        beta_start = lo if beta_start is None else beta_start
        beta_end = hi if beta_end is None else beta_end
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range ({beta_start}, {beta_end})")
    return NoiseSchedule(betas=np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _per_example(arr, t, ndim):
    """Schedule value(s) at step t, shaped to broadcast over (B, ...)."""
    t = np.asarray(t)
    vals = arr[t - 1]
    if t.ndim == 0:
        return float(vals)
    return vals.reshape((-1,) + (1,) * (ndim - 1))


def forward_marginal(schedule, y0, t, noise):
    """Sample q(y_t | y_0) = N(sqrt(ab_t) y0, (1 - ab_t) I) via the given noise."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"step t={t} outside [1, {schedule.T}]")
    ab = _per_example(schedule.alpha_bars, t, np.asarray(y0).ndim)
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * noise


def posterior_params(schedule, y_t, y0, t):
    """Mean and variance of q(y_{t-1} | y_t, y_0) for t >= 2."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 2) or np.any(t_arr > schedule.T):
        raise ValueError(f"posterior step t={t} outside [2, {schedule.T}]; "
                         "t = 1 belongs to the reconstruction term")
    ndim = np.asarray(y0).ndim
    ab = schedule.alpha_bars
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    coef0 = np.sqrt(ab_prev) * schedule.betas / (1.0 - ab)
    coeft = np.sqrt(schedule.alphas) * (1.0 - ab_prev) / (1.0 - ab)
    mu = _per_example(coef0, t, ndim) * y0 + _per_example(coeft, t, ndim) * y_t
    return mu, _per_example(schedule.beta_tildes, t, ndim)


class Denoiser(Module):
    """Scale-free residual noise predictor with learned step embeddings.

    The network refines a fixed coordinatewise-Gaussian base predictor whose
    mean/variance default to (0, 1) and can be fitted to the aggregated code
    distribution with :meth:`fit_base`; a freshly initialized denoiser then
    already behaves like an independent-Gaussian prior over the context.
    """

    def __init__(self, code_shape, steps, channels=32, blocks=3, seed=0,
                 dtype=np.float32):
        Ch = code_shape[0]
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xD1)))
        self.code_shape = tuple(code_shape)
        self.steps = steps
        self.conv_in = Conv(Ch, channels, 3, rng, dtype)
        self.blocks = [ResBlock(channels, channels, rng, dtype)
                       for _ in range(blocks)]
        self.step_embed = [
            T.Parameter(rng.normal(0.0, 0.02, size=(steps, channels)).astype(dtype))
            for _ in range(blocks)
        ]
        self.conv_out = Conv(channels, Ch, 3, rng, dtype, zero_init=True)
        # non-trainable base statistics (persisted in checkpoint metadata)
        self.base_mean = np.zeros(self.code_shape, dtype=np.float64)
        self.base_var = np.ones(self.code_shape, dtype=np.float64)

    def fit_base(self, y0_samples, var_floor=1e-4):
        """Set the base predictor to per-coordinate moments of given codes."""
        y = np.asarray(y0_samples, dtype=np.float64)
        self.base_mean = y.mean(axis=0)
        self.base_var = np.maximum(y.var(axis=0), var_floor)

    def __call__(self, y_t, t):
        """Predict the forward noise for y_t at step(s) t (1-based)."""
        dtype = self.conv_in.w.dtype
        yt = y_t if isinstance(y_t, T.Tensor) else T.constant(np.asarray(y_t, dtype))
        B = yt.shape[0]
        t_idx = np.broadcast_to(np.asarray(t, dtype=np.int64) - 1, (B,))
        h = self.conv_in(yt)
        for block, table in zip(self.blocks, self.step_embed):
            emb = T.reshape(T.take_rows(table, t_idx), (B, -1, 1, 1))
            h = block(h + emb)
        return self.conv_out(T.silu(h))

    def predicted_mean(self, y_t, t, schedule):
        """Reverse mean (y_t - beta_t/sqrt(1-ab_t) * eps_hat) / sqrt(alpha_t).

        The noise estimate is parameterized residually as net(y_t, t) plus the
        closed-form optimum for coordinatewise Gaussian data,
        sqrt(1-ab_t) (y_t - sqrt(ab_t) m) / (ab_t v + 1 - ab_t); with a zero
        network output the stepwise KLs therefore start finite instead of
        inheriting the exploding 1/sqrt(alpha_t) mean.
        """
        dtype = self.conv_in.w.dtype
        yt = y_t if isinstance(y_t, T.Tensor) else T.constant(np.asarray(y_t, dtype))
        eps_net = self(yt, t)
        ndim = len(yt.shape)
        beta = _per_example(schedule.betas, t, ndim)
        ab = _per_example(schedule.alpha_bars, t, ndim)
        alpha = _per_example(schedule.alphas, t, ndim)
        gain = np.sqrt(1.0 - ab) / (ab * self.base_var + (1.0 - ab))
        shift = gain * np.sqrt(ab) * self.base_mean
        eps_hat = eps_net + yt * T.constant(np.asarray(gain, dtype)) \
            - T.constant(np.asarray(shift, dtype))
        coef = np.asarray(beta / np.sqrt(1.0 - ab), dtype=dtype)
        scale = np.asarray(1.0 / np.sqrt(alpha), dtype=dtype)
        return (yt - eps_hat * T.constant(coef)) * T.constant(scale)


def terminal_kl(schedule, y0):
    """Closed-form KL(q(y_T | y_0) || N(0, I)) per example, as numpy."""
    ab_T = schedule.alpha_bars[-1]
    per_dim = 0.5 * (ab_T * (np.asarray(y0, np.float64) ** 2 - 1.0)
                     - np.log1p(-ab_T) * np.ones_like(y0, dtype=np.float64))
    return per_dim.reshape(per_dim.shape[0], -1).sum(axis=1)


def _step_kl(denoiser, schedule, y0, t_arr, eps):
    """Gaussian-vs-Gaussian KL of one intermediate step (shared variances)."""
    y_t = forward_marginal(schedule, y0, t_arr, eps)
    mu_q, var = posterior_params(schedule, y_t, y0, t_arr)
    dtype = denoiser.conv_in.w.dtype
    mu_p = denoiser.predicted_mean(y_t.astype(dtype), t_arr, schedule)
    diff = mu_p - T.constant(np.asarray(mu_q, dtype))
    inv = np.asarray(0.5 / var, dtype=dtype) * np.ones_like(y0, dtype=dtype)
    per_dim = T.square(diff) * T.constant(inv)
    return T.sum_(per_dim, axis=tuple(range(1, np.asarray(y0).ndim)))


def _recon_term(denoiser, schedule, y0, eps, codec):
    y1 = forward_marginal(schedule, y0, 1, eps)
    dtype = denoiser.conv_in.w.dtype
    mu = denoiser.predicted_mean(y1.astype(dtype), 1, schedule)
    sigma1 = np.sqrt(schedule.sampler_variances[0])
    logstd = T.constant(np.full_like(np.asarray(y0, dtype), np.log(sigma1)))
    ll = discretized_gaussian_loglik(np.asarray(y0), mu, logstd,
                                     b=codec.bin_reciprocal_width(),
                                     grid_anchor=codec.grid_anchor)
    return -T.sum_(ll, axis=tuple(range(1, np.asarray(y0).ndim)))


def vlb_loss(y0, denoiser, schedule, codec, mode="full", rng=None,
             t_sample=None, noise_bank=None):
    """Upper bound on -ln p(y0) in nats, per example (record node of shape (B,)).

    ``mode='full'`` sums the reconstruction term, every intermediate KL and
    the terminal KL; ``mode='stochastic'`` draws one t in [2, T] per example
    and weights that term by T-1 (reconstruction and terminal terms are always
    included).  ``noise_bank`` may pin the noise: {'l0': eps, t: eps_t} plus
    't_sample' handled by the argument.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    B = y0.shape[0]
    if rng is None:
        rng = np.random.default_rng()

    def draw(key):
        if noise_bank is not None and key in noise_bank:
            return np.asarray(noise_bank[key])
        return rng.standard_normal(y0.shape)

    total = _recon_term(denoiser, schedule, y0, draw("l0"), codec)
    Tsteps = schedule.T
    if Tsteps >= 2:
        if mode == "full":
            for t in range(2, Tsteps + 1):
                t_arr = np.full(B, t)
                total = total + _step_kl(denoiser, schedule, y0, t_arr, draw(t))
        elif mode == "stochastic":
            if t_sample is None:
                t_sample = rng.integers(2, Tsteps + 1, size=B)
            t_arr = np.asarray(t_sample)
            eps = np.empty_like(y0)
            for t in np.unique(t_arr):
                mask = t_arr == t
                eps[mask] = draw(int(t))[mask]
            kl = _step_kl(denoiser, schedule, y0, t_arr, eps)
            total = total + kl * float(Tsteps - 1)
        else:
            raise ValueError(f"unknown vlb mode {mode!r}")
    lt = terminal_kl(schedule, y0).astype(total.dtype)
    return total + T.constant(lt)


def ancestral_sample(denoiser, schedule, codec, count, rng, trained_steps=None):
    """Draw integer context codes by running the reverse chain.

    The final step samples the t=1 reverse Gaussian and snaps it onto the
    context grid, which realizes the binned reconstruction distribution.
    """
    if trained_steps is not None and trained_steps <= 0:
        raise ValueError("refusing to sample from an untrained context prior")
    shape = (count,) + tuple(codec.code_shape)
    y = rng.standard_normal(shape)
    variances = schedule.sampler_variances
    for t in range(schedule.T, 1, -1):
        mu = denoiser.predicted_mean(y, t, schedule).data.astype(np.float64)
        y = mu + np.sqrt(variances[t - 1]) * rng.standard_normal(shape)
    mu = denoiser.predicted_mean(y, 1, schedule).data.astype(np.float64)
    u = mu + np.sqrt(variances[0]) * rng.standard_normal(shape)
    return codec.grid_round(np.clip(u, -1.0, 1.0))
