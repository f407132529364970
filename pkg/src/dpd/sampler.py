"""DDIM-style angular sampling, guidance, continuation, and inpainting.

The sampler walks the angle schedule from delta_T = pi/2 down to 0,
applying z <- cos(omega) z - sin(omega) v_hat at each step. Velocity
models are anything with a `velocity(z, angle_vector, tokens,
unconditional=False)` method returning an (L, D) array; the trained
network and the analytic point-mass oracle both qualify.

Continuation and inpainting give already-clean frames a zero angle in the
condition vector and freeze them: a zero-angle frame receives no update
(the network still sees it as context), so context rows come back
bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import ChunkLayout, chunk_boundaries
from .errors import ConfigError, DataError, ShapeError
from .schedule import AngleSchedule, HALF_PI


@dataclass(frozen=True)
class SamplerConfig:
    schedule: AngleSchedule
    cfg_scale: float = 1.0
    seed: int = 0
    chunk_count: int = 4

    def __post_init__(self):
        if self.cfg_scale < 0.0:
            raise ConfigError(f"cfg scale must be >= 0, got {self.cfg_scale}")
        if self.chunk_count < 1:
            raise ConfigError("chunk_count must be >= 1")


def ddim_step(z_delta: np.ndarray, v_hat: np.ndarray, omega: float) -> np.ndarray:
    """Deterministic angular update cos(omega) z - sin(omega) v_hat."""
    z_delta = np.asarray(z_delta, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if z_delta.shape != v_hat.shape:
        raise ShapeError(f"shape mismatch: {z_delta.shape} vs {v_hat.shape}")
    if not (0.0 < omega <= HALF_PI):
        raise DataError(f"step angle must lie in (0, pi/2], got {omega!r}")
    return math.cos(omega) * z_delta - math.sin(omega) * v_hat


def ddim_step_reference(z_delta: np.ndarray, v_hat: np.ndarray, delta: float,
                        omega: float) -> np.ndarray:
    """Pre-simplification form of the same update, kept as an oracle.

    Reconstructs clean latent and noise from the velocity, then re-noises at
    the smaller angle:

        z' = a' (a z - s v) + s' (s z + a v)
           = (a' a + s' s) z + (s' a - a' s) v,

    a = cos(delta), s = sin(delta), a' = cos(delta - omega),
    s' = sin(delta - omega).
    """
    a, s = math.cos(delta), math.sin(delta)
    ap, sp = math.cos(delta - omega), math.sin(delta - omega)
    return (ap * a + sp * s) * np.asarray(z_delta) + (sp * a - ap * s) * np.asarray(v_hat)


def cfg_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: v_uncond + scale * (v_cond - v_uncond)."""
    v_cond = np.asarray(v_cond, dtype=np.float64)
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"shape mismatch: {v_cond.shape} vs {v_uncond.shape}")
    return v_uncond + scale * (v_cond - v_uncond)


def _guided_velocity(model, z, angle_vector, tokens, config: SamplerConfig) -> np.ndarray:
    v_cond = model.velocity(z, angle_vector, tokens)
    if config.cfg_scale == 1.0:
        # guidance is a no-op at scale 1; skipping the second pass keeps the
        # trajectory bit-identical to unguided sampling
        return v_cond
    v_uncond = model.velocity(z, angle_vector, tokens, unconditional=True)
    return cfg_velocity(v_cond, v_uncond, config.cfg_scale)


class DiracOracleModel:
    """Analytic velocity for a point-mass data distribution at z_star.

    v(z_delta, delta) = cos(delta) eps_hat - sin(delta) z_star with
    eps_hat = (z_delta - cos(delta) z_star) / sin(delta); near delta = 0 the
    division is skipped and eps_hat := 0. Supports per-frame angle vectors.
    """

    def __init__(self, z_star: np.ndarray):
        self.z_star = np.asarray(z_star, dtype=np.float64)

    def velocity(self, z, angle_vector, tokens=None, unconditional=False):
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self.z_star.shape:
            raise ShapeError(f"oracle target shape {self.z_star.shape} vs input {z.shape}")
        d = np.asarray(angle_vector, dtype=np.float64)[:, None]
        sin_d, cos_d = np.sin(d), np.cos(d)
        eps_hat = np.where(sin_d > 1e-9, (z - cos_d * self.z_star) / np.where(
            sin_d > 1e-9, sin_d, 1.0), 0.0)
        return cos_d * eps_hat - sin_d * self.z_star


def sample(tokens, model, config: SamplerConfig, frames: int,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Generate an (frames, D)-latent from pure noise.

    Runs t = T..1 with a constant angle vector delta_t per step (inference
    uses a single noise scale), classifier-free guidance per step, and the
    angular DDIM update with omega_t.
    """
    if frames < 1:
        raise DataError("frames must be >= 1")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    sched = config.schedule
    z = rng.standard_normal((frames, _latent_dim(model)))
    for t in range(sched.step_count - 1, -1, -1):
        angle_vector = np.full(frames, sched.deltas[t])
        v = _guided_velocity(model, z, angle_vector, tokens, config)
        z = ddim_step(z, v, sched.omegas[t])
    return z


def _latent_dim(model) -> int:
    if hasattr(model, "config"):
        return model.config.latent_dim
    return model.z_star.shape[-1]


@dataclass(frozen=True)
class ContinuationState:
    """Clean context frames plus the tokens that conditioned them."""

    context_latent: np.ndarray
    layout: ChunkLayout
    context_tokens: np.ndarray = field(default=None)

    @property
    def window_frames(self) -> int:
        return self.layout.frames

    @property
    def new_chunk_frames(self) -> int:
        L, M = self.layout.frames, self.layout.chunk_count
        return -(-L // M)  # ceil(L / M)

    def __post_init__(self):
        ctx = np.asarray(self.context_latent, dtype=np.float64)
        object.__setattr__(self, "context_latent", ctx)
        if self.context_tokens is not None:
            object.__setattr__(self, "context_tokens",
                               np.asarray(self.context_tokens))
        expect = self.window_frames - self.new_chunk_frames
        if ctx.ndim != 2 or ctx.shape[0] != expect:
            raise ShapeError(f"context must hold {expect} frames, got {ctx.shape}")


def continuation_angle_vector(L: int, M: int, delta_t: float) -> np.ndarray:
    """[0]*(L - ceil(L/M)) followed by [delta_t]*ceil(L/M)."""
    new = -(-L // M)
    vec = np.zeros(L)
    vec[L - new:] = delta_t
    return vec


def continue_latent(state: ContinuationState, new_tokens, model,
                    config: SamplerConfig,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Denoise one fresh chunk appended after clean context frames.

    Returns the full window (length L); the context rows are bit-identical
    to the input, the trailing ceil(L/M) rows are newly generated.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    L = state.window_frames
    new = state.new_chunk_frames
    ctx = state.context_latent
    new_tokens = np.asarray(new_tokens)
    if state.context_tokens is not None:
        window_tokens = np.concatenate([state.context_tokens, new_tokens])
    else:
        window_tokens = new_tokens

    z = np.concatenate([ctx, rng.standard_normal((new, ctx.shape[1]))], axis=0)
    sched = config.schedule
    for t in range(sched.step_count - 1, -1, -1):
        angle_vector = continuation_angle_vector(L, state.layout.chunk_count,
                                                 sched.deltas[t])
        v = _guided_velocity(model, z, angle_vector, window_tokens, config)
        updated = ddim_step(z[L - new:], v[L - new:], sched.omegas[t])
        z = np.concatenate([ctx, updated], axis=0)
    return z


def generate_long(total_frames: int, token_stream, model, config: SamplerConfig,
                  frames: int, tokens_per_window: int) -> np.ndarray:
    """One base window then sliding continuations until total_frames.

    Each continuation drops the oldest ceil(L/M) frames (and ceil(T_ST/M)
    tokens) from the window and appends a fresh noise chunk conditioned on
    the next tokens from the stream.
    """
    if total_frames < frames:
        raise DataError(f"total_frames must be >= window frames ({frames})")
    token_stream = np.asarray(token_stream)
    if tokens_per_window < 1 or tokens_per_window > token_stream.shape[0]:
        raise DataError("token stream shorter than one window")
    M = config.chunk_count
    layout = chunk_boundaries(frames, M)
    new_frames = -(-frames // M)
    new_tokens = -(-tokens_per_window // M)

    rng = np.random.default_rng(config.seed)
    window_tokens = token_stream[:tokens_per_window]
    consumed = tokens_per_window
    window = sample(window_tokens, model, config, frames, rng=rng)
    result = window.copy()

    while result.shape[0] < total_frames:
        if consumed + new_tokens > token_stream.shape[0]:
            raise DataError(
                f"token stream exhausted: have {token_stream.shape[0]}, need "
                f"{consumed + new_tokens} for the next chunk")
        incoming = token_stream[consumed:consumed + new_tokens]
        consumed += new_tokens
        state = ContinuationState(window[new_frames:], layout,
                                  window_tokens[new_tokens:])
        window_tokens = np.concatenate([window_tokens[new_tokens:], incoming])
        window = continue_latent(state, incoming, model, config, rng=rng)
        result = np.concatenate([result, window[frames - new_frames:]], axis=0)
    return result[:total_frames]


def inpaint(z_given, mask, tokens, model, config: SamplerConfig,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Regenerate the masked frames of z_given; unmasked frames are frozen.

    Masked frames start as fresh noise; each step's angle vector carries
    delta_t on masked frames and 0 elsewhere, and only masked rows receive
    the DDIM update.
    """
    z_given = np.asarray(z_given, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if z_given.ndim != 2:
        raise ShapeError(f"expected (L, D) latent, got {z_given.shape}")
    if mask.shape != (z_given.shape[0],):
        raise ShapeError(f"mask length {mask.shape} does not match {z_given.shape[0]} frames")
    if not mask.any():
        return z_given.copy()
    if rng is None:
        rng = np.random.default_rng(config.seed)

    noise = rng.standard_normal(z_given.shape)
    z = np.where(mask[:, None], noise, z_given)
    sched = config.schedule
    for t in range(sched.step_count - 1, -1, -1):
        angle_vector = np.where(mask, sched.deltas[t], 0.0)
        v = _guided_velocity(model, z, angle_vector, tokens, config)
        updated = ddim_step(z[mask], v[mask], sched.omegas[t])
        z = z.copy()
        z[mask] = updated
    return z
