"""Top-down hierarchical VAE with Gaussian stochastic layers.

The generative path runs top-down from the coarsest scale; the inference path
shares it, adding bottom-up encoder features to each posterior head.  When a
context codec is configured, the top latent slot is the deterministic integer
code of the input: its decoded image is average-pooled to every scale,
projected by a 1x1 convolution and added to the top-down features at the
start of the scale.  Posterior means are parameterized as residuals on top of
prior means, and log-stds are clamped to [-7, 2].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dct import ContextCodec
from .nets import Conv, Module, ResBlock

__all__ = [
    "LayerSpec", "ModelConfig", "SampleRequest", "LayerState", "LatentHierarchy",
    "HVAE", "gaussian_kl", "reparam_sample", "bernoulli_loglik",
    "discretized_gaussian_loglik", "LOGSTD_LO", "LOGSTD_HI",
]

LOGSTD_LO = -7.0
LOGSTD_HI = 2.0


@dataclass(frozen=True)
class LayerSpec:
    """One stochastic layer: spatial resolution and latent channel count."""

    resolution: int
    channels: int = 1

    @property
    def units(self):
        return self.channels * self.resolution * self.resolution


@dataclass
class ModelConfig:
    """Architecture description; defaults follow the binary-image setup."""

    image_size: int = 28
    image_channels: int = 1
    layers: tuple = ((LayerSpec(14), LayerSpec(14), LayerSpec(14), LayerSpec(14),
                      LayerSpec(7), LayerSpec(7), LayerSpec(7), LayerSpec(7)))
    width: int = 32
    hidden: int = 40
    head_channels: int = 16
    enc_blocks: int = 1
    likelihood: str = "bernoulli"
    context: ContextCodec | None = None
    precision: str = "float32"

    def __post_init__(self):
        self.layers = tuple(self.layers)
        res = [s.resolution for s in self.layers]
        if any(a < b for a, b in zip(res, res[1:])):
            raise ValueError(f"layer resolutions must be non-increasing bottom-to-"
                             f"top, got {res}")
        if self.likelihood not in ("bernoulli", "discretized_gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        for s in self.layers:
            if self.image_size % s.resolution:
                raise ValueError(f"image size {self.image_size} not divisible by "
                                 f"layer resolution {s.resolution}")
        if self.context is not None:
            if self.context.Ch != self.image_channels or self.context.D != self.image_size:
                raise ValueError("context codec extents do not match the image")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def L(self):
        """Total latent slots, counting the context when present."""
        return len(self.layers) + (1 if self.context is not None else 0)

    @property
    def latent_units(self):
        """Learned latent dimensionality (context excluded)."""
        return int(sum(s.units for s in self.layers))

    @property
    def context_units(self):
        return 0 if self.context is None else self.context.units

    @property
    def scales(self):
        """Distinct layer resolutions, coarsest first (top-down order)."""
        seen = []
        for s in self.layers:
            if s.resolution not in seen:
                seen.append(s.resolution)
        return tuple(sorted(seen))

    def to_dict(self):
        ctx = None
        if self.context is not None:
            c = self.context
            ctx = {"mode": c.mode, "D": c.D, "d": c.d, "Ch": c.Ch, "v": c.v,
                   "pixel_range": list(c.pixel_range),
                   "S": None if c.S is None else c.S.tolist()}
        return {"image_size": self.image_size,
                "image_channels": self.image_channels,
                "layers": [[s.resolution, s.channels] for s in self.layers],
                "width": self.width, "hidden": self.hidden,
                "head_channels": self.head_channels, "enc_blocks": self.enc_blocks,
                "likelihood": self.likelihood, "precision": self.precision,
                "context": ctx}

    @classmethod
    def from_dict(cls, blob):
        ctx = blob.get("context")
        codec = None
        if ctx is not None:
            codec = ContextCodec(D=ctx["D"], d=ctx["d"], Ch=ctx["Ch"],
                                 mode=ctx["mode"], v=ctx["v"],
                                 S=None if ctx["S"] is None else np.asarray(ctx["S"]),
                                 pixel_range=tuple(ctx["pixel_range"]))
        return cls(image_size=blob["image_size"],
                   image_channels=blob["image_channels"],
                   layers=tuple(LayerSpec(r, c) for r, c in blob["layers"]),
                   width=blob["width"], hidden=blob["hidden"],
                   head_channels=blob["head_channels"],
                   enc_blocks=blob["enc_blocks"], likelihood=blob["likelihood"],
                   precision=blob["precision"], context=codec)


@dataclass(frozen=True)
class SampleRequest:
    """What to draw: all-posterior, all-prior, or the top m slots posterior."""

    count: int = 1
    temperature: float = 1.0
    mode: str = "reconstruction"
    m: int | None = None

    def __post_init__(self):
        if self.mode not in ("reconstruction", "unconditional", "partial"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "partial" and self.m is None:
            raise ValueError("partial mode needs m")
        if not (0.0 <= self.temperature <= 1.0):
            raise ValueError(f"temperature must lie in [0, 1], got {self.temperature}")

    def posterior_slots(self, L):
        """Number of top slots drawn from the posterior chain."""
        if self.mode == "reconstruction":
            return L
        if self.mode == "unconditional":
            return 0
        if not (0 <= self.m <= L):
            raise ValueError(f"partial m={self.m} outside [0, L={L}]")
        return self.m


@dataclass
class LayerState:
    """Record-carrying per-layer distributions, sample, and per-unit KL."""

    q_mean: T.Tensor
    q_logstd: T.Tensor
    p_mean: T.Tensor
    p_logstd: T.Tensor
    z: T.Tensor
    kl: T.Tensor  # per-unit, same shape as z
    from_posterior: bool


@dataclass
class LatentHierarchy:
    """States bottom-to-top (index 0 = layer nearest the image)."""

    layers: list
    context_values: np.ndarray | None = None
    context_decoded: np.ndarray | None = None

    def total_kl(self):
        """Summed-over-units KL per image, as a record node (B,)."""
        parts = [T.sum_(st.kl, axis=(1, 2, 3)) for st in self.layers]
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    def per_unit_kl_arrays(self):
        """Per-layer numpy KL arrays (B, units), bottom-to-top."""
        return [st.kl.data.reshape(st.kl.data.shape[0], -1) for st in self.layers]


# ---------------------------------------------------------------------------
# distribution helpers
# ---------------------------------------------------------------------------

def gaussian_kl(q_mean, q_logstd, p_mean, p_logstd):
    """Per-unit KL(N(q) || N(p)) = ln(sp/sq) + (sq^2 + (mq-mp)^2)/(2 sp^2) - 1/2."""
    ratio = T.exp((q_logstd - p_logstd) * 2.0)
    delta = q_mean - p_mean
    quad = T.square(delta) * T.exp(p_logstd * -2.0)
    return (p_logstd - q_logstd) + (ratio + quad) * 0.5 - 0.5


def reparam_sample(mean, logstd, noise, tau=1.0):
    """mean + tau * exp(logstd) * noise, with noise a fixed input."""
    if tau == 0.0:
        return mean + T.exp(logstd) * 0.0  # keep shape/record structure
    return mean + T.exp(logstd) * (tau * noise)


def bernoulli_loglik(x, logits):
    """Per-image log-likelihood of binary x under pixelwise Bernoulli logits."""
    xd = x.data if isinstance(x, T.Tensor) else np.asarray(x)
    if not np.all((xd == 0.0) | (xd == 1.0)):
        raise ValueError("bernoulli likelihood expects binary images")
    xc = T.constant(xd.astype(logits.dtype))
    ll = -(xc * T.softplus(-logits) + (1.0 - xc) * T.softplus(logits))
    return T.sum_(ll, axis=tuple(range(1, len(ll.shape))))


def discretized_gaussian_loglik(x, mean, logstd, b, grid_anchor=1.0, validate=True):
    """Log of the Gaussian mass on the quantization bin around each x.

    ``x`` must sit on a uniform grid of step 2/b inside [-1, 1]; the bins are
    [x - 1/b, x + 1/b] with open tails at exactly -1 and +1.  ``b`` may be a
    scalar or a per-coordinate array (broadcastable to x); ``grid_anchor`` is
    any point the grid passes through (1 for pixel grids, 0 for context grids)
    and is used only to validate that x is on-grid.
    """
    xd = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    dtype = mean.dtype
    b_arr = np.broadcast_to(np.asarray(b, dtype=np.float64), xd.shape)
    if np.any(b_arr <= 0):
        raise ValueError("bin parameter b must be positive")
    if np.abs(xd).max(initial=0.0) > 1.0 + 1e-9:
        raise ValueError("discretized likelihood expects x in [-1, 1]")
    if validate:
        steps = (grid_anchor - xd) * b_arr / 2.0
        if np.abs(steps - np.rint(steps)).max(initial=0.0) > 1e-6:
            raise ValueError("x is off the declared quantization grid")
    inv_b = (1.0 / b_arr).astype(dtype)
    hi = (xd >= 1.0 - 1e-12)
    lo = (xd <= -1.0 + 1e-12)
    xc = np.asarray(xd, dtype=dtype)

    sigma_inv = T.exp(-logstd)
    z_plus = (T.constant(xc + inv_b) - mean) * sigma_inv
    z_minus = (T.constant(xc - inv_b) - mean) * sigma_inv
    cdf_plus = T.gauss_cdf(z_plus)
    cdf_minus = T.gauss_cdf(z_minus)
    # open tails: mass integrates to +-infinity at the grid extremes
    one = np.ones_like(xc)
    cdf_plus = cdf_plus * T.constant((~hi).astype(dtype)) + T.constant(hi.astype(dtype) * one)
    cdf_minus = cdf_minus * T.constant((~lo).astype(dtype))
    mass = cdf_plus - cdf_minus
    return T.log(T.clip(mass, 1e-12, np.inf))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class _TopDownLayer(Module):
    def __init__(self, spec, cfg, rng, dtype, top_prior_fixed):
        zc, w = spec.channels, cfg.width
        self.spec = spec
        self.top_prior_fixed = top_prior_fixed
        # 1x1 heads with small gains so early KLs stay modest; the residual
        # block below provides the spatial mixing
        self.prior_head = Conv(w, 2 * zc + w, 1, rng, dtype, gain=0.01)
        self.post_head = Conv(2 * w, 2 * zc, 1, rng, dtype, gain=0.01)
        self.z_proj = Conv(zc, w, 1, rng, dtype,
                           gain=0.25)
        self.block = ResBlock(w, cfg.hidden, rng, dtype)


class _Scale(Module):
    def __init__(self, resolution, cfg, rng, dtype):
        self.resolution = resolution
        self.start = T.Parameter(np.zeros((1, cfg.width, resolution, resolution),
                                          dtype=dtype))
        if cfg.context is not None:
            self.ctx_proj = Conv(cfg.image_channels, cfg.width, 1, rng, dtype)
        else:
            self.ctx_proj = None


class HVAE(Module):
    """Hierarchical VAE; all latent layers are diagonal Gaussians.

    The topmost learned layer of a context-free model keeps a standard-normal
    prior; with a context codec the topmost slot is the deterministic code and
    every learned layer keeps a conditional prior.
    """

    def __init__(self, config, seed=0):
        cfg = config
        self._config = cfg
        dtype = cfg.dtype
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xA1)))

        # encoder: image -> features at every latent scale
        self.enc_in = Conv(cfg.image_channels, cfg.width, 3, rng, dtype)
        self._enc_plan = []
        prev = cfg.image_size
        for res in sorted(cfg.scales, reverse=True):
            self._enc_plan.append((res, prev // res))
            prev = res
        self.enc_stage_blocks = [
            [ResBlock(cfg.width, cfg.hidden, rng, dtype) for _ in range(cfg.enc_blocks)]
            for _ in self._enc_plan
        ]

        # decoder: per-scale state plus one module per stochastic layer
        self.dec_scales = [
            _Scale(res, cfg, rng, dtype) for res in cfg.scales  # coarsest first
        ]
        top_idx = len(cfg.layers) - 1
        self.dec_layers = [
            _TopDownLayer(spec, cfg, rng, dtype,
                          top_prior_fixed=(cfg.context is None and i == top_idx))
            for i, spec in enumerate(cfg.layers)
        ]
        # 1x1 first so the full-resolution 3x3 runs on few channels
        self.out_pre = Conv(cfg.width, cfg.head_channels, 1, rng, dtype)
        self.out_mid = Conv(cfg.head_channels, cfg.head_channels, 3, rng, dtype)
        out_ch = cfg.image_channels if cfg.likelihood == "bernoulli" \
            else 2 * cfg.image_channels
        self.out_head = Conv(cfg.head_channels, out_ch, 1, rng, dtype, gain=0.1)

    # the config attribute is stored via a private name so the parameter walk
    # in Module.named_parameters never descends into it
    @property
    def config(self):
        return self._config

    # -- inference path --------------------------------------------------------

    def bottom_up(self, x):
        """Deterministic encoder features keyed by resolution."""
        cfg = self.config
        xt = x if isinstance(x, T.Tensor) else T.constant(np.asarray(x, cfg.dtype))
        if xt.shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"input shape {xt.shape} does not match configured "
                             f"image {(cfg.image_channels, cfg.image_size, cfg.image_size)}")
        h = self.enc_in(xt)
        feats = {}
        for (res, pool), blocks in zip(self._enc_plan, self.enc_stage_blocks):
            if pool > 1:
                h = T.avg_pool(h, pool)
            for block in blocks:
                h = block(h)
            feats[res] = h
        return feats

    # -- generative / inference top-down pass ----------------------------------

    def top_down(self, request, x=None, context_code=None, enc_feats=None,
                 noise=None):
        """Run the shared top-down pass and return (hierarchy, likelihood params).

        Posterior slots sample from q (unit temperature); prior slots sample
        from p at the request temperature.  ``noise`` may be an
        ``np.random.Generator`` or a pre-drawn bank (list indexed like
        ``config.layers``).
        """
        cfg = self.config
        dtype = cfg.dtype
        ctx_present = cfg.context is not None
        n_q = request.posterior_slots(cfg.L)
        learned_q = max(0, n_q - 1) if ctx_present else n_q
        ctx_from_x = ctx_present and n_q >= 1 and context_code is None
        if (learned_q > 0 and x is None and enc_feats is None) or (ctx_from_x and x is None):
            raise ValueError(f"mode {request.mode!r} with m={n_q} samples the "
                             "posterior and requires x")

        xt = None
        if x is not None:
            xt = x if isinstance(x, T.Tensor) else T.constant(np.asarray(x, dtype))
            batch = xt.shape[0]
        elif context_code is not None and np.asarray(context_code).ndim == 4:
            batch = np.asarray(context_code).shape[0]
        else:
            batch = request.count
        if learned_q > 0 and enc_feats is None:
            enc_feats = self.bottom_up(xt)

        # context slot (index L) is deterministic: encode x or use the given code
        ctx_decoded = None
        ctx_values = None
        if ctx_present:
            if ctx_from_x:
                ctx_values = cfg.context.encode_values(xt.data.astype(np.float64))
            elif context_code is not None:
                ctx_values = np.asarray(context_code)
                if ctx_values.ndim == 3:
                    ctx_values = np.broadcast_to(
                        ctx_values, (batch,) + ctx_values.shape).copy()
            else:
                raise ValueError("prior-mode sampling of a context model needs a "
                                 "context code drawn from the context prior")
            ctx_decoded = cfg.context.decode_values(ctx_values).astype(dtype)

        rng = noise if isinstance(noise, np.random.Generator) else None
        bank = noise if not isinstance(noise, np.random.Generator) else None

        learned = len(cfg.layers)
        states = [None] * learned
        h = None
        layer_idx = learned - 1  # walk top -> bottom
        for scale in self.dec_scales:
            res = scale.resolution
            if h is None:
                h = T.constant(np.zeros((batch, cfg.width, res, res), dtype=dtype))
            else:
                h = T.nearest_upsample(h, res // h.shape[-1])
            h = h + scale.start
            if ctx_decoded is not None:
                pooled = _pool_to(ctx_decoded, res)
                h = h + scale.ctx_proj(T.constant(pooled))
            while layer_idx >= 0 and cfg.layers[layer_idx].resolution == res:
                layer = self.dec_layers[layer_idx]
                # slot number of this learned layer, 1-based from the bottom
                slot = layer_idx + 1
                use_q = slot > cfg.L - n_q
                eps = _draw_noise(bank, rng, layer_idx,
                                  (batch, layer.spec.channels, res, res), dtype)
                st, h = self._run_layer(layer, h, enc_feats, use_q, eps,
                                        request.temperature)
                states[layer_idx] = st
                layer_idx -= 1

        factor = cfg.image_size // cfg.scales[-1]
        if factor > 1:
            h = T.nearest_upsample(h, factor)
        params = self.out_head(T.silu(self.out_mid(T.silu(self.out_pre(h)))))
        hierarchy = LatentHierarchy(layers=states, context_values=ctx_values,
                                    context_decoded=None if ctx_decoded is None
                                    else np.asarray(ctx_decoded))
        return hierarchy, params

    def _run_layer(self, layer, h, enc_feats, use_q, eps, temperature):
        zc = layer.spec.channels
        w = self.config.width
        p_out = layer.prior_head(h)
        p_mean, p_logstd_raw, feat = T.split(p_out, [zc, zc, w], axis=1)
        if layer.top_prior_fixed:
            zero = T.constant(np.zeros_like(p_mean.data))
            p_mean, p_logstd_raw = zero, zero
        p_logstd = T.clip(p_logstd_raw, LOGSTD_LO, LOGSTD_HI)

        if use_q:
            q_in = T.concat([h, enc_feats[layer.spec.resolution]], axis=1)
            dq_mean, q_logstd_raw = T.split(layer.post_head(q_in), [zc, zc], axis=1)
            q_mean = p_mean + dq_mean
            q_logstd = T.clip(q_logstd_raw, LOGSTD_LO, LOGSTD_HI)
            z = reparam_sample(q_mean, q_logstd, T.constant(eps), tau=1.0)
        else:
            q_mean, q_logstd = p_mean, p_logstd
            z = reparam_sample(p_mean, p_logstd, T.constant(eps), tau=temperature)

        kl = gaussian_kl(q_mean, q_logstd, p_mean, p_logstd)
        h = h + feat + layer.z_proj(z)
        h = layer.block(h)
        return LayerState(q_mean=q_mean, q_logstd=q_logstd, p_mean=p_mean,
                          p_logstd=p_logstd, z=z, kl=kl,
                          from_posterior=use_q), h

    # -- likelihood -------------------------------------------------------------

    def log_likelihood(self, x, params):
        """Per-image log p(x | z) for the configured head."""
        cfg = self.config
        if cfg.likelihood == "bernoulli":
            return bernoulli_loglik(x, params)
        ch = cfg.image_channels
        mean, logstd_raw = T.split(params, [ch, ch], axis=1)
        logstd = T.clip(logstd_raw, LOGSTD_LO, LOGSTD_HI)
        ll = discretized_gaussian_loglik(x, mean, logstd, b=255.0)
        return T.sum_(ll, axis=tuple(range(1, len(ll.shape))))

    def decode_params_to_image(self, params):
        """Expected image under the likelihood head, as numpy."""
        cfg = self.config
        if cfg.likelihood == "bernoulli":
            return T.sigmoid(params).data
        mean, _ = T.split(params, [cfg.image_channels, cfg.image_channels], axis=1)
        return np.clip(mean.data, -1.0, 1.0)

    def calibrate_output_bias(self, images):
        """Point the zero-initialized likelihood head at the data marginals.

        Without this, the first gradients are dominated by the head bias
        chasing the mean pixel value across every position at once.
        """
        cfg = self.config
        x = np.asarray(images, dtype=np.float64)
        per_channel = x.mean(axis=(0, 2, 3))
        bias = self.out_head.b.data
        if cfg.likelihood == "bernoulli":
            p = np.clip(per_channel, 1e-3, 1.0 - 1e-3)
            bias[0, :, 0, 0] = np.log(p / (1.0 - p)).astype(cfg.dtype)
        else:
            std = np.clip(x.std(axis=(0, 2, 3)), 1e-2, None)
            ch = cfg.image_channels
            bias[0, :ch, 0, 0] = per_channel.astype(cfg.dtype)
            bias[0, ch:, 0, 0] = np.log(std).astype(cfg.dtype)


def _pool_to(img, res):
    size = img.shape[-1]
    if size == res:
        return img
    factor = size // res
    *lead, H, W = img.shape
    shape = (*lead, H // factor, factor, W // factor, factor)
    nd = len(shape)
    return img.reshape(shape).mean(axis=(nd - 3, nd - 1)).astype(img.dtype)


def _draw_noise(bank, rng, layer_idx, shape, dtype):
    if bank is not None:
        eps = np.asarray(bank[layer_idx], dtype=dtype)
        if eps.shape != shape:
            raise ValueError(f"noise bank entry {layer_idx} has shape {eps.shape}, "
                             f"expected {shape}")
        return eps
    if rng is None:
        rng = np.random.default_rng()
    return rng.standard_normal(shape).astype(dtype)


def make_noise_bank(config, batch, rng):
    """Pre-draw one noise tensor per learned layer (indexed like config.layers)."""
    return [rng.standard_normal((batch, s.channels, s.resolution, s.resolution))
            .astype(config.dtype) for s in config.layers]
