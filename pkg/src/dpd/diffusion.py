"""Forward diffusion, multi-chunk construction, and latent/velocity algebra.

Latent sequences are plain float64 arrays of shape (L, D) — L frames by D
channels — and everything here is a pure function over them. The
multi-chunk operations partition the frame axis into M contiguous chunks
with boundaries floor(m*L/M) and give each chunk its own noise angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .schedule import HALF_PI


@dataclass(frozen=True)
class ChunkLayout:
    """M-way partition of [0, L): boundaries[m] = floor(m*L/M)."""

    chunk_count: int
    boundaries: np.ndarray

    @property
    def frames(self) -> int:
        return int(self.boundaries[-1])

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def slices(self):
        b = self.boundaries
        return [slice(int(b[m]), int(b[m + 1])) for m in range(self.chunk_count)]


def chunk_boundaries(L: int, M: int) -> ChunkLayout:
    """Partition L frames into M non-empty chunks via floor(m*L/M)."""
    if M < 1:
        raise DataError(f"chunk count must be >= 1, got {M}")
    if L < M:
        raise DataError(f"cannot split {L} frames into {M} non-empty chunks")
    bounds = np.array([(m * L) // M for m in range(M + 1)], dtype=np.int64)
    bounds.setflags(write=False)
    return ChunkLayout(M, bounds)


def _as_latent(x, name="latent") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (frames x channels), got shape {x.shape}")
    return x


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _check_angle(delta):
    if not (0.0 <= delta <= HALF_PI):
        raise DataError(f"angle {delta!r} outside [0, pi/2]")


def _check_chunk_angles(angles, M) -> np.ndarray:
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (M,):
        raise ShapeError(f"expected {M} chunk angles, got shape {angles.shape}")
    if np.any(angles < 0.0) or np.any(angles > HALF_PI):
        raise DataError("chunk angles must lie in [0, pi/2]")
    return angles


def forward_diffuse(z, eps, delta: float) -> np.ndarray:
    """Noisy latent cos(delta) * z + sin(delta) * eps."""
    z = _as_latent(z, "z")
    eps = _as_latent(eps, "eps")
    _check_same_shape(z, eps)
    _check_angle(delta)
    return math.cos(delta) * z + math.sin(delta) * eps


def transition_kernel_params(delta_s: float, delta_t: float):
    """Mean coefficient and variance of the Gaussian transition s -> t.

    mean_coeff = cos(delta_t)/cos(delta_s);
    variance   = sin(delta_t)^2 - mean_coeff^2 * sin(delta_s)^2
    (the squared-ratio composition, nonnegative for all valid angle pairs).
    """
    _check_angle(delta_s)
    _check_angle(delta_t)
    if delta_s >= delta_t:
        raise DataError(f"need delta_s < delta_t, got {delta_s!r} >= {delta_t!r}")
    cs = math.cos(delta_s)
    if cs == 0.0:
        raise ZeroDivisionError("transition from delta_s = pi/2 is degenerate (cos = 0)")
    mean_coeff = math.cos(delta_t) / cs
    variance = math.sin(delta_t) ** 2 - (mean_coeff ** 2) * math.sin(delta_s) ** 2
    return mean_coeff, variance


def _check_layout(layout: ChunkLayout, L: int):
    if layout.frames != L:
        raise ShapeError(f"layout covers {layout.frames} frames but latent has {L}")


def build_multichunk_noisy(z, eps, layout: ChunkLayout, angles) -> np.ndarray:
    """Per-chunk forward diffusion: chunk m gets angle delta_m."""
    z = _as_latent(z, "z")
    eps = _as_latent(eps, "eps")
    _check_same_shape(z, eps)
    _check_layout(layout, z.shape[0])
    angles = _check_chunk_angles(angles, layout.chunk_count)
    out = np.empty_like(z)
    for m, sl in enumerate(layout.slices()):
        out[sl] = math.cos(angles[m]) * z[sl] + math.sin(angles[m]) * eps[sl]
    return out


def build_velocity_target(z, eps, layout: ChunkLayout, angles) -> np.ndarray:
    """Concatenated per-chunk velocities cos(delta_m)*eps - sin(delta_m)*z."""
    z = _as_latent(z, "z")
    eps = _as_latent(eps, "eps")
    _check_same_shape(z, eps)
    _check_layout(layout, z.shape[0])
    angles = _check_chunk_angles(angles, layout.chunk_count)
    out = np.empty_like(z)
    for m, sl in enumerate(layout.slices()):
        out[sl] = math.cos(angles[m]) * eps[sl] - math.sin(angles[m]) * z[sl]
    return out


def z_from_v(z_delta, v, delta: float) -> np.ndarray:
    """Recover the clean latent: cos(delta)*z_delta - sin(delta)*v."""
    z_delta = _as_latent(z_delta, "z_delta")
    v = _as_latent(v, "v")
    _check_same_shape(z_delta, v)
    return math.cos(delta) * z_delta - math.sin(delta) * v


def eps_from_v(z_delta, v, delta: float) -> np.ndarray:
    """Recover the noise: sin(delta)*z_delta + cos(delta)*v."""
    z_delta = _as_latent(z_delta, "z_delta")
    v = _as_latent(v, "v")
    _check_same_shape(z_delta, v)
    return math.sin(delta) * z_delta + math.cos(delta) * v


def diffusion_loss(v_target, v_hat) -> float:
    """Squared L2 norm of the residual, summed over frames and channels.

    For batched 3-D inputs (B, L, D) the sum is divided by the batch size.
    """
    v_target = np.asarray(v_target, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if v_target.shape != v_hat.shape:
        raise ShapeError(f"shape mismatch: {v_target.shape} vs {v_hat.shape}")
    if v_target.ndim not in (2, 3):
        raise ShapeError(f"expected 2-D or 3-D velocities, got shape {v_target.shape}")
    diff = v_hat - v_target
    total = float(np.sum(diff * diff))
    if v_target.ndim == 3:
        total /= v_target.shape[0]
    return total


def build_angle_vector(layout: ChunkLayout, angles) -> np.ndarray:
    """Frame-level condition vector: frame l carries its chunk's angle."""
    angles = _check_chunk_angles(angles, layout.chunk_count)
    return np.repeat(angles, layout.lengths)


def clamp_latent(raw) -> np.ndarray:
    """Map raw encoder outputs into [-1, 1]: clip(raw / 3, -1, 1)."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DataError("latent contains non-finite entries")
    return np.clip(raw / 3.0, -1.0, 1.0)
