"""Joint objective assembly and the optimization loop.

The scalar objective is the negative evidence bound in nats per image:
reconstruction negative log-likelihood, plus the summed layer KLs, plus (for
context models) the diffusion bound on the context code.  Updates use
decoupled weight decay with adaptive moments, a cosine learning-rate decay,
global-norm clipping, and a skip rule that discards steps whose pre-clip
gradient norm exceeds a threshold.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import binarize_dynamic
from .diffusion import Denoiser, DiffusionConfig, build_schedule, vlb_loss
from .model import HVAE, ModelConfig, SampleRequest, make_noise_bank

__all__ = [
    "TrainConfig", "RunManifest", "TrainState", "AdamW", "cosine_lr",
    "joint_objective", "train_step", "run_training", "pixels_to_grid",
    "DiffusionPrior",
]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    grad_skip: float = 100.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only

    def __post_init__(self):
        if not (self.lr_start >= self.lr_end > 0.0):
            raise ValueError(f"need lr_start >= lr_end > 0, got "
                             f"({self.lr_start}, {self.lr_end})")
        if self.grad_clip <= 0.0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.grad_skip < self.grad_clip:
            raise ValueError(f"grad_skip {self.grad_skip} must be >= grad_clip "
                             f"{self.grad_clip}")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, blob):
        return cls(**blob)


@dataclass
class DiffusionPrior:
    """Denoiser + schedule over a codec's normalized grid."""

    denoiser: Denoiser
    schedule: object
    codec: object


@dataclass
class RunManifest:
    """Append-only record of one training run."""

    config: dict
    seed: int
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    data_checksums: dict = field(default_factory=dict)
    status: str = "initialized"

    def add_row(self, **row):
        if self.metrics and row["epoch"] < self.metrics[-1]["epoch"]:
            raise ValueError("metric rows must be monotone in epoch index")
        self.metrics.append(row)

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "split", "nelbo_nats", "kl_nats",
                             "diff_nats", "skips"])
            for row in self.metrics:
                writer.writerow([row["epoch"], row["split"], row["nelbo_nats"],
                                 row["kl_nats"], row["diff_nats"], row["skips"]])


def cosine_lr(step, total_steps, lr_start, lr_end):
    """lr_end + (lr_start - lr_end)(1 + cos(pi step/total)) / 2."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_start
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + np.cos(np.pi * step / total_steps))


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            if self.weight_decay:
                p.data -= np.asarray(lr * self.weight_decay, p.data.dtype) * p.data
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= np.asarray(lr, p.data.dtype) * update.astype(p.data.dtype)

    def state_arrays(self):
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{p.name}"] = m
            out[f"adam.v.{p.name}"] = v
        return out

    def load_state(self, arrays, t):
        self.t = int(t)
        for i, p in enumerate(self.params):
            self.m[i] = np.asarray(arrays[f"adam.m.{p.name}"], dtype=p.data.dtype)
            self.v[i] = np.asarray(arrays[f"adam.v.{p.name}"], dtype=p.data.dtype)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def pixels_to_grid(images):
    """uint8 intensities onto the 256-level [-1, 1] grid."""
    return np.asarray(images, np.float64) * (2.0 / 255.0) - 1.0


def joint_objective(x, model, prior=None, rng=None, diff_mode="stochastic",
                    noise=None, diff_noise=None, return_hierarchy=False):
    """Mean negative bound in nats/image, with its additive decomposition.

    Returns (scalar record node, parts) where parts carries per-image numpy
    arrays 'recon', 'kl', 'diff' whose means sum to the scalar.
    """
    cfg = model.config
    if (cfg.context is not None) != (prior is not None):
        raise ValueError("model and objective disagree about the context prior")
    if prior is not None and prior.codec is not cfg.context:
        raise ValueError("model and diffusion prior must share the context codec")
    if rng is None:
        rng = np.random.default_rng()

    request = SampleRequest(mode="reconstruction")
    hierarchy, params = model.top_down(request, x=x, noise=noise if noise is not None else rng)
    ll = model.log_likelihood(x, params)
    kl = hierarchy.total_kl()
    per_image = -ll + kl
    diff_arr = np.zeros(ll.shape[0])
    diff_term = None
    if prior is not None:
        y0 = prior.codec.normalize(hierarchy.context_values)
        diff_term = vlb_loss(y0, prior.denoiser, prior.schedule, prior.codec,
                             mode=diff_mode, rng=rng, noise_bank=diff_noise)
        per_image = per_image + diff_term
        diff_arr = diff_term.data.astype(np.float64)
    loss = T.mean(per_image)
    parts = {
        "recon": -ll.data.astype(np.float64),
        "kl": kl.data.astype(np.float64),
        "diff": diff_arr,
    }
    if return_hierarchy:
        return loss, parts, hierarchy
    return loss, parts


# ---------------------------------------------------------------------------
# steps and loops
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: HVAE
    prior: DiffusionPrior | None
    optimizer: AdamW
    config: TrainConfig
    total_steps: int
    global_step: int = 0
    skips: int = 0

    @property
    def params(self):
        return self.optimizer.params

    def lr(self):
        return cosine_lr(min(self.global_step, self.total_steps), self.total_steps,
                         self.config.lr_start, self.config.lr_end)


def train_step(batch, state, rng):
    """One optimization step; returns metrics including whether it was skipped.

    The optimized scalar is the bound in nats per pixel (the clip and skip
    thresholds are calibrated for that scale); metrics report nats per image.
    """
    cfg = state.config
    lr = state.lr()
    T.zero_grads(state.params)
    noise = make_noise_bank(state.model.config, batch.shape[0], rng)
    nats, parts = joint_objective(batch, state.model, state.prior, rng=rng,
                                  noise=noise)
    mc = state.model.config
    loss = nats * (1.0 / (mc.image_channels * mc.image_size ** 2))
    metrics = {"loss": float(nats.data), "lr": lr,
               "recon": float(parts["recon"].mean()),
               "kl": float(parts["kl"].mean()),
               "diff": float(parts["diff"].mean()),
               "skipped": False, "grad_norm": float("nan")}
    state.global_step += 1
    if not np.isfinite(loss.data):
        state.skips += 1
        metrics["skipped"] = True
        return metrics
    T.backward(loss)
    gnorm = T.global_grad_norm(state.params)
    metrics["grad_norm"] = gnorm
    if not np.isfinite(gnorm) or gnorm > cfg.grad_skip:
        state.skips += 1
        metrics["skipped"] = True
        return metrics
    if gnorm > cfg.grad_clip:
        scale = cfg.grad_clip / gnorm
        for p in state.params:
            p.grad *= np.asarray(scale, p.grad.dtype)
    state.optimizer.step(lr)
    return metrics


def _epoch_rng(seed, epoch, purpose):
    return np.random.default_rng(np.random.SeedSequence((int(seed), purpose, int(epoch))))


def _prepare_split(images, likelihood, seed, epoch):
    if likelihood == "bernoulli":
        return binarize_dynamic(images, seed, epoch).astype(np.float64)
    return pixels_to_grid(images)


def evaluate_bound(model, prior, images, seed, batch_size=256):
    """Deterministic full-sum validation bound; returns mean parts in nats."""
    rng = _epoch_rng(seed, 0, 0x7A)
    rows = {"nelbo": [], "kl": [], "diff": []}
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size]
        loss, parts = joint_objective(chunk, model, prior, rng=rng,
                                      diff_mode="full")
        rows["nelbo"].append(parts["recon"] + parts["kl"] + parts["diff"])
        rows["kl"].append(parts["kl"])
        rows["diff"].append(parts["diff"])
    return {k: float(np.concatenate(v).mean()) for k, v in rows.items()}


def build_artifacts(model_config, diffusion_config, seed):
    """Instantiate the model (and prior when the config carries a codec)."""
    model = HVAE(model_config, seed=seed)
    prior = None
    if model_config.context is not None:
        schedule = build_schedule(diffusion_config.steps,
                                  diffusion_config.beta_start,
                                  diffusion_config.beta_end)
        denoiser = Denoiser(model_config.context.code_shape,
                            diffusion_config.steps,
                            channels=diffusion_config.channels,
                            blocks=diffusion_config.blocks,
                            seed=seed, dtype=model_config.dtype)
        prior = DiffusionPrior(denoiser=denoiser, schedule=schedule,
                               codec=model_config.context)
    return model, prior


def _all_named_arrays(model, prior):
    arrays = dict(model.state_arrays(prefix="model."))
    if prior is not None:
        arrays.update(prior.denoiser.state_arrays(prefix="prior."))
    return arrays


def save_run_checkpoint(path, model, prior, optimizer, meta):
    arrays = _all_named_arrays(model, prior)
    arrays.update(optimizer.state_arrays())
    meta = dict(meta)
    meta["adam_t"] = optimizer.t
    meta["model_config"] = model.config.to_dict()
    if prior is not None:
        meta["denoiser_base"] = {"mean": prior.denoiser.base_mean.tolist(),
                                 "var": prior.denoiser.base_var.tolist()}
    save_checkpoint(path, arrays, meta)


def load_run_artifacts(path, diffusion_config=None):
    """Rebuild (model, prior, arrays, meta) from a checkpoint file."""
    arrays, meta = load_checkpoint(path)
    model_config = ModelConfig.from_dict(meta["model_config"])
    dc = diffusion_config
    if dc is None and meta.get("diffusion_config"):
        dc = DiffusionConfig.from_dict(meta["diffusion_config"])
    if dc is None:
        dc = DiffusionConfig()
    model, prior = build_artifacts(model_config, dc, seed=meta.get("seed", 0))
    model.load_state({k[len("model."):]: v for k, v in arrays.items()
                      if k.startswith("model.")})
    if prior is not None:
        prior.denoiser.load_state({k[len("prior."):]: v for k, v in arrays.items()
                                   if k.startswith("prior.")})
        if meta.get("denoiser_base"):
            prior.denoiser.base_mean = np.asarray(meta["denoiser_base"]["mean"])
            prior.denoiser.base_var = np.asarray(meta["denoiser_base"]["var"])
    return model, prior, arrays, meta


def run_training(model_config, train_config, datasets, diffusion_config=None,
                 out_dir=None, resume=None, log=None):
    """Train for the configured epochs and emit a manifest.

    ``datasets`` maps split name to Dataset (uint8 images); the train split is
    re-binarized every epoch for the Bernoulli head, while validation uses a
    fixed draw.  A checkpoint with optimizer state is written per the config,
    so resuming reproduces the continuation bit-exactly.
    """
    tc = train_config
    dc = diffusion_config or DiffusionConfig()
    train_images = datasets["train"].images
    val_images = datasets["val"].images if "val" in datasets else None

    # calibration data: the first-epoch draw the model will actually observe
    calib = _prepare_split(train_images, model_config.likelihood, tc.seed, 0)
    if model_config.context is not None and not model_config.context.fitted:
        from .dct import fit_normalization
        model_config.context = fit_normalization(calib, model_config.context)

    model, prior = build_artifacts(model_config, dc, seed=tc.seed)
    model.calibrate_output_bias(calib)
    if prior is not None:
        codes = model_config.context.encode_values(calib)
        prior.denoiser.fit_base(model_config.context.normalize(codes))
    params = model.parameters() + (prior.denoiser.parameters() if prior else [])
    optimizer = AdamW(params, beta1=tc.adam_beta1, beta2=tc.adam_beta2,
                      eps=tc.adam_eps, weight_decay=tc.weight_decay)

    steps_per_epoch = max(1, train_images.shape[0] // tc.batch_size)
    state = TrainState(model=model, prior=prior, optimizer=optimizer, config=tc,
                       total_steps=max(1, tc.epochs * steps_per_epoch))
    start_epoch = 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        model.load_state({k[len("model."):]: v for k, v in arrays.items()
                          if k.startswith("model.")})
        if prior is not None:
            prior.denoiser.load_state({k[len("prior."):]: v for k, v in arrays.items()
                                       if k.startswith("prior.")})
            if meta.get("denoiser_base"):
                prior.denoiser.base_mean = np.asarray(meta["denoiser_base"]["mean"])
                prior.denoiser.base_var = np.asarray(meta["denoiser_base"]["var"])
        optimizer.load_state(arrays, meta["adam_t"])
        state.global_step = int(meta["global_step"])
        state.skips = int(meta["skips"])
        start_epoch = int(meta["epoch"]) + 1

    manifest = RunManifest(
        config={"model": model_config.to_dict(), "trainer": tc.to_dict(),
                "diffusion": dc.to_dict()},
        seed=tc.seed,
        data_checksums={name: ds.checksum for name, ds in datasets.items()},
    )
    manifest.status = "running"
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def emit(path_stub="manifest"):
        if out_dir:
            manifest.save(os.path.join(out_dir, f"{path_stub}.json"))
            manifest.save_csv(os.path.join(out_dir, "metrics.csv"))

    try:
        for epoch in range(start_epoch, tc.epochs):
            t0 = time.time()
            epoch_rng = _epoch_rng(tc.seed, epoch, 0xE0)
            binarized = _prepare_split(train_images, model_config.likelihood,
                                       tc.seed, epoch)
            order = epoch_rng.permutation(train_images.shape[0])
            losses = []
            for step in range(steps_per_epoch):
                idx = order[step * tc.batch_size:(step + 1) * tc.batch_size]
                metrics = train_step(binarized[idx], state, epoch_rng)
                if not metrics["skipped"]:
                    losses.append((metrics["loss"], metrics["kl"], metrics["diff"]))
            if losses:
                arr = np.asarray(losses)
                manifest.add_row(epoch=epoch, split="train",
                                 nelbo_nats=float(arr[:, 0].mean()),
                                 kl_nats=float(arr[:, 1].mean()),
                                 diff_nats=float(arr[:, 2].mean()),
                                 skips=state.skips)
            if val_images is not None:
                fixed = _prepare_split(val_images, model_config.likelihood,
                                       tc.seed, None)
                vals = evaluate_bound(model, prior, fixed, tc.seed)
                manifest.add_row(epoch=epoch, split="val",
                                 nelbo_nats=vals["nelbo"], kl_nats=vals["kl"],
                                 diff_nats=vals["diff"], skips=state.skips)
            if log:
                last = manifest.metrics[-1]
                log(f"epoch {epoch}: {last['split']} nelbo {last['nelbo_nats']:.2f} "
                    f"({time.time() - t0:.1f}s)")
            if out_dir and (tc.checkpoint_every
                            and (epoch + 1) % tc.checkpoint_every == 0):
                path = os.path.join(out_dir, f"ckpt_epoch{epoch:04d}.hvck")
                save_run_checkpoint(path, model, prior, optimizer, {
                    "epoch": epoch, "global_step": state.global_step,
                    "skips": state.skips, "seed": tc.seed,
                    "train_steps": state.global_step,
                    "diffusion_config": dc.to_dict()})
                manifest.checkpoints.append(path)
            emit()
    except Exception:
        manifest.status = "aborted"
        emit()
        raise

    if out_dir:
        path = os.path.join(out_dir, "ckpt_final.hvck")
        save_run_checkpoint(path, model, prior, optimizer, {
            "epoch": tc.epochs - 1, "global_step": state.global_step,
            "skips": state.skips, "seed": tc.seed,
            "train_steps": state.global_step,
            "diffusion_config": dc.to_dict()})
        manifest.checkpoints.append(path)
    manifest.status = "complete"
    emit()
    return manifest, model, prior
