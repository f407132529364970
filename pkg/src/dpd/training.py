"""Toy-scale training: synthetic data, the multi-chunk objective, AdamW,
and the evaluation metrics (velocity MSE, scale-invariant SNR improvement).

The synthetic dataset maps token sequences to sinusoidal latent patterns,
so semantic conditioning is informative by construction: token u selects
the frequency, each channel has a fixed amplitude and phase, and frame l
only depends on the token covering it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import (build_angle_vector, build_multichunk_noisy,
                        build_velocity_target, chunk_boundaries, forward_diffuse,
                        z_from_v)
from .errors import ConfigError, DataError, ShapeError, TrainingDivergenceError
from .network import DpdModel, velocity_forward
from .sampler import SamplerConfig, ddim_step
from .schedule import HALF_PI, make_schedule

CAP_DB = 200.0  # sentinel for perfect (or perfectly bad) recovery

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01
CLIP_NORM = 1.0


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SynthDatasetSpec:
    num_examples: int
    frames: int
    channels: int
    tokens_per_example: int
    vocab: int
    seed: int = 0
    frames_per_token: int = 10

    def __post_init__(self):
        if self.num_examples < 1 or self.channels < 1 or self.vocab < 1:
            raise ConfigError("counts must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.frames != self.tokens_per_example * self.frames_per_token:
            raise ConfigError(
                f"frames ({self.frames}) must equal tokens_per_example * "
                f"frames_per_token ({self.tokens_per_example} * {self.frames_per_token})")


@dataclass
class SynthDataset:
    spec: SynthDatasetSpec
    tokens: np.ndarray   # (n, T_ST) int64, ids in 1..vocab
    latents: np.ndarray  # (n, L, D) in [-0.95, 0.95]

    def __len__(self):
        return self.tokens.shape[0]


TOKEN_CYCLES = 0.125  # token id u selects frequency u/8 (cycles over L frames)
AMP_RANGE = (0.6, 0.95)


def _channel_params(spec: SynthDatasetSpec):
    rng = np.random.default_rng([spec.seed, 0])
    amps = rng.uniform(AMP_RANGE[0], AMP_RANGE[1], size=spec.channels)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=spec.channels)
    return amps, phases


def latent_for_tokens(spec: SynthDatasetSpec, tokens) -> np.ndarray:
    """The pure token -> latent map: frame l of channel d is
    a_d * sin(2*pi * f(u_{floor(l/ratio)}) * l / L + phi_d), f(u) = u/8.

    Low frequencies keep the patterns locally smooth (denoisable from
    context) while distinct tokens still select visibly distinct patterns.
    """
    tokens = np.asarray(tokens)
    if tokens.shape != (spec.tokens_per_example,):
        raise ShapeError(f"expected {spec.tokens_per_example} tokens, got {tokens.shape}")
    amps, phases = _channel_params(spec)
    L = spec.frames
    l = np.arange(L)
    freq = tokens[l // spec.frames_per_token].astype(np.float64) * TOKEN_CYCLES
    arg = 2.0 * math.pi * freq * l / L
    return amps[None, :] * np.sin(arg[:, None] + phases[None, :])


def synth_dataset(spec: SynthDatasetSpec) -> SynthDataset:
    """Token sequences drawn uniformly from the vocabulary; latents are the
    pure function of (seed, tokens) above."""
    rng = np.random.default_rng([spec.seed, 1])
    tokens = rng.integers(1, spec.vocab + 1, size=(spec.num_examples,
                                                   spec.tokens_per_example))
    latents = np.stack([latent_for_tokens(spec, t) for t in tokens])
    return SynthDataset(spec, tokens.astype(np.int64), latents)


# -- optimizer -----------------------------------------------------------------


class AdamW:
    """Decoupled weight decay Adam with global-norm gradient clipping."""

    def __init__(self, store, learning_rate: float = 5e-4,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS, weight_decay: float = WEIGHT_DECAY,
                 clip_norm: float = CLIP_NORM):
        self.store = store
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def step(self):
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for name, p in self.store.items()}
        if self.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {name: g * scale for name, g in grads.items()}
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


# -- training -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int
    learning_rate: float = 5e-4
    chunk_count: int = 4
    cfg_dropout_prob: float = 0.1
    seed: int = 0
    eval_every: int = 200

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps, batch_size, and eval_every must be positive")
        if not 0.0 <= self.cfg_dropout_prob <= 1.0:
            raise ConfigError("cfg_dropout_prob must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.chunk_count < 1:
            raise ConfigError("chunk_count must be >= 1")


def batch_loss(tokens, latents, model: DpdModel, cfg: TrainConfig,
               rng: np.random.Generator):
    """Multi-chunk velocity loss for one batch, as an autodiff scalar.

    RNG draw order per step: chunk angles (B x M), noise (B x L x D), one
    branch draw per example. Examples whose branch draw falls below the
    dropout probability run the unconditional pass.
    """
    tokens = np.asarray(tokens)
    latents = np.asarray(latents, dtype=np.float64)
    B, L, D = latents.shape
    layout = chunk_boundaries(L, cfg.chunk_count)

    angles = rng.uniform(0.0, HALF_PI, size=(B, cfg.chunk_count))
    eps = rng.standard_normal((B, L, D))
    uncond = rng.uniform(size=B) < cfg.cfg_dropout_prob

    z_noisy = np.stack([build_multichunk_noisy(latents[b], eps[b], layout, angles[b])
                        for b in range(B)])
    v_tgt = np.stack([build_velocity_target(latents[b], eps[b], layout, angles[b])
                      for b in range(B)])
    angle_vecs = np.stack([build_angle_vector(layout, angles[b]) for b in range(B)])

    pieces = []
    for flag in (False, True):
        idx = np.flatnonzero(uncond == flag)
        if idx.size == 0:
            continue
        v_hat = velocity_forward(z_noisy[idx], angle_vecs[idx], tokens[idx], model,
                                 unconditional=flag)
        diff = ad.sub(v_hat, v_tgt[idx])
        pieces.append(ad.tsum(ad.mul(diff, diff)))
    total = pieces[0] if len(pieces) == 1 else ad.add(pieces[0], pieces[1])
    return ad.mul(total, 1.0 / B)


def train_step(batch, model: DpdModel, opt: AdamW, cfg: TrainConfig,
               rng: np.random.Generator) -> float:
    """One optimization step; returns the scalar loss."""
    tokens, latents = batch
    loss = batch_loss(tokens, latents, model, cfg, rng)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDivergenceError(
            f"non-finite training loss {value!r} at optimizer step {opt.t + 1}",
            diagnostics={"step": opt.t + 1, "loss": value,
                         "params_finite": model.store.all_finite()})
    model.store.zero_grad()
    loss.backward()
    opt.step()
    return value


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (step, velocity_mse, si_snri)


def run_training(model: DpdModel, dataset: SynthDataset, cfg: TrainConfig,
                 holdout: SynthDataset | None = None,
                 on_checkpoint=None, early_stop=None) -> TrainResult:
    """Deterministic training loop over the dataset.

    Per step: draw batch indices, then the batch_loss draws (angles, noise,
    branch), so the whole run is a pure function of (model seed, dataset
    seed, train seed). Evaluates on `holdout` every eval_every steps; an
    `early_stop(step, result) -> bool` hook (also only consulted at
    evaluation points, so it cannot perturb the rng stream) may end the run
    once its target is met.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.store, learning_rate=cfg.learning_rate)
    result = TrainResult()
    n = len(dataset)
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        loss = train_step((dataset.tokens[idx], dataset.latents[idx]),
                          model, opt, cfg, rng)
        result.losses.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            if holdout is not None:
                mse = velocity_mse_eval(model, holdout,
                                        np.full(cfg.chunk_count, math.pi / 4),
                                        seed=cfg.seed + 1)
                snri = si_snri_eval(model, holdout, math.pi / 4, seed=cfg.seed + 2)
                result.evals.append((step, mse, snri))
            if on_checkpoint is not None:
                on_checkpoint(step, model, result)
            if early_stop is not None and early_stop(step, result):
                break
    return result


# -- metrics ----------------------------------------------------------------------


def si_snr(estimate, reference) -> float:
    """Scale-invariant SNR in dB, flattened over all elements.

    10*log10(|a s|^2 / |s_hat - a s|^2) with a = <s_hat, s> / |s|^2; exact
    recovery reports the +200 dB sentinel (capped symmetrically below).
    """
    est = np.asarray(estimate, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise ShapeError("si_snr arguments must have matching shapes")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DataError("si_snr reference must not be all-zero")
    a = float(np.dot(est, ref)) / ref_energy
    target = a * ref
    num = float(np.dot(target, target))
    den = float(np.sum((est - target) ** 2))
    if den == 0.0:
        return CAP_DB
    if num == 0.0:
        return -CAP_DB
    return float(np.clip(10.0 * math.log10(num / den), -CAP_DB, CAP_DB))


def _batched_velocity(model, z_batch, angle_vecs, tokens):
    """Model velocities for a stack of examples, batched when supported."""
    try:
        return model.velocity(z_batch, angle_vecs, tokens)
    except (ShapeError, TypeError, IndexError):
        # oracle-style models only accept one sequence at a time
        return np.stack([model.velocity(z_batch[b], angle_vecs[b], tokens[b])
                         for b in range(z_batch.shape[0])])


def velocity_mse_eval(model, dataset: SynthDataset, angles, seed: int = 0) -> float:
    """Mean per-element squared velocity error at fixed evaluation angles."""
    angles = np.asarray(angles, dtype=np.float64)
    layout = chunk_boundaries(dataset.spec.frames, angles.shape[0])
    angle_vec = build_angle_vector(layout, angles)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    eps = rng.standard_normal((n,) + dataset.latents.shape[1:])
    z_noisy = np.stack([build_multichunk_noisy(dataset.latents[b], eps[b], layout,
                                               angles) for b in range(n)])
    v_tgt = np.stack([build_velocity_target(dataset.latents[b], eps[b], layout,
                                            angles) for b in range(n)])
    vecs = np.broadcast_to(angle_vec, (n,) + angle_vec.shape).copy()
    v_hat = _batched_velocity(model, z_noisy, vecs, dataset.tokens)
    per_example = np.mean((v_hat - v_tgt) ** 2, axis=(1, 2))
    return float(np.mean(per_example))


def si_snri_eval(model, dataset: SynthDataset, delta: float, seed: int = 0) -> float:
    """Mean SI-SNR improvement of the recovered latent over the noisy one."""
    if not 0.0 < delta < HALF_PI:
        raise DataError("si_snri_eval needs delta strictly inside (0, pi/2)")
    rng = np.random.default_rng(seed)
    L = dataset.spec.frames
    n = len(dataset)
    eps = rng.standard_normal((n,) + dataset.latents.shape[1:])
    z_delta = np.stack([forward_diffuse(dataset.latents[b], eps[b], delta)
                        for b in range(n)])
    vecs = np.full((n, L), delta)
    v_hat = _batched_velocity(model, z_delta, vecs, dataset.tokens)
    improvements = []
    for b in range(n):
        z = dataset.latents[b]
        z_hat = z_from_v(z_delta[b], v_hat[b], delta)
        improvements.append(si_snr(z_hat, z) - si_snr(z_delta[b], z))
    return float(np.mean(improvements))


# -- schedule ablation ---------------------------------------------------------------


@dataclass
class AblationReport:
    rows: list          # (schedule, steps, latent_mse)
    step_rows: list     # (schedule, steps, t, delta_after, mse_after_step)


def _instrumented_sample(tokens, model, config: SamplerConfig, frames: int,
                         z_ref: np.ndarray):
    """sample() with per-step error tracking; draws identically to sample()."""
    rng = np.random.default_rng(config.seed)
    sched = config.schedule
    z = rng.standard_normal(z_ref.shape)
    per_step = []
    for t in range(sched.step_count - 1, -1, -1):
        angle_vector = np.full(frames, sched.deltas[t])
        v_cond = model.velocity(z, angle_vector, tokens)
        if config.cfg_scale == 1.0:
            v = v_cond
        else:
            v_uncond = model.velocity(z, angle_vector, tokens, unconditional=True)
            v = v_uncond + config.cfg_scale * (v_cond - v_uncond)
        z = ddim_step(z, v, sched.omegas[t])
        delta_after = sched.deltas[t - 1] if t > 0 else 0.0
        per_step.append((t, delta_after, float(np.mean((z - z_ref) ** 2))))
    return z, per_step


def ablate_schedules(model, examples, T_list, cfg_scale: float = 1.0,
                     seed: int = 0, chunk_count: int = 4) -> AblationReport:
    """Compare uniform and linear schedules at each step count.

    `examples` is a list of (tokens, reference_latent) pairs, typically
    held out from training. Reports the mean squared latent error of the
    generated sample against the reference, plus per-step errors.
    """
    if not examples:
        raise DataError("ablation needs at least one held-out example")
    rows = []
    step_rows = []
    for T in T_list:
        for kind in ("uniform", "linear"):
            config = SamplerConfig(schedule=make_schedule(kind, T),
                                   cfg_scale=cfg_scale, seed=seed,
                                   chunk_count=chunk_count)
            errors = []
            for i, (tokens, z_ref) in enumerate(examples):
                z_ref = np.asarray(z_ref, dtype=np.float64)
                out, per_step = _instrumented_sample(tokens, model, config,
                                                     z_ref.shape[0], z_ref)
                errors.append(float(np.mean((out - z_ref) ** 2)))
                if i == 0:
                    step_rows.extend((kind, T, t, d, e) for t, d, e in per_step)
            rows.append((kind, T, float(np.mean(errors))))
    return AblationReport(rows, step_rows)
