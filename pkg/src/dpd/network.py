"""The dual-path velocity network.

Input latents are projected to the hidden width, mixed with the frame-level
angle embedding, cut into half-overlapping segments, and pushed through N
dual-path blocks. Each block runs a coarse path (rotary attention across
segments, per merged column, with cross-attention to the semantic tokens)
and a fine path (bidirectional SRU within each segment, FiLM-modulated by
the angle embedding and the pooled token embedding), with pre-norm
residuals between the stages. Overlap-add and an output projection map the
result back to latent space.

Segment merging is sandglass-shaped: block i averages windows of
g = 2^min(i, N-i+1) columns at stride g/2, so the middle blocks see the
coarsest view and the first/last blocks the finest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import (ANGLE_ENCODER_MODES, AngleEncoderParams, TokenEncoderParams,
                           encode_angles, encode_tokens, init_angle_encoder,
                           init_token_encoder, pooled_tokens)
from .errors import ConfigError, ShapeError
from .primitives import (AttentionParams, FilmParams, MlpBlock, ParamStore, SruParams,
                         cross_attention, film, init_attention, init_film, init_mlp,
                         init_sru, matrix_init, mlp, rmsnorm, rotary_self_attention,
                         sru_bidirectional)


@dataclass(frozen=True)
class DpdConfig:
    """Architecture hyperparameters; embedded verbatim in checkpoints."""

    latent_dim: int
    hidden_dim: int
    block_count: int
    segment_size: int
    vocab: int
    heads: int = 8
    angle_encoder_mode: str = "slerp"
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.hidden_dim < 2 or self.hidden_dim % 2 != 0:
            raise ConfigError("hidden_dim must be even and >= 2")
        if self.block_count < 1:
            raise ConfigError("block_count must be >= 1")
        if self.segment_size < 2 or self.segment_size % 2 != 0:
            raise ConfigError("segment_size must be even and >= 2")
        if self.vocab < 1:
            raise ConfigError("vocab must be >= 1")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError("hidden_dim must be divisible by heads")
        if (self.hidden_dim // self.heads) % 2 != 0:
            raise ConfigError("head dim must be even for rotary embedding")
        if self.angle_encoder_mode not in ANGLE_ENCODER_MODES:
            raise ConfigError(f"unknown angle encoder mode {self.angle_encoder_mode!r}")


# -- segmentation ------------------------------------------------------------


@dataclass
class SegmentTensor:
    """S x K x D_hid view of an L-frame sequence plus its padding record."""

    data: Tensor
    frames: int
    segment_size: int
    pad_front: int
    pad_back: int

    @property
    def count(self) -> int:
        return self.data.shape[-3]


def segment_count(L: int, K: int) -> int:
    return -(-2 * L // K) + 1


def segment(h, K: int) -> SegmentTensor:
    """Cut (..., L, D) into S half-overlapping K-frame segments.

    S = ceil(2L/K) + 1; the sequence is padded with K/2 zero frames in front
    and minimally behind so S windows at stride K/2 tile it exactly.
    """
    if K < 2 or K % 2 != 0:
        raise ConfigError(f"segment size must be even and >= 2, got {K}")
    h = ad.as_tensor(h)
    if h.data.ndim < 2 or h.data.shape[-2] < 1:
        raise ShapeError(f"expected (..., L, D) with L >= 1, got shape {h.data.shape}")
    L = h.data.shape[-2]
    S = segment_count(L, K)
    pad_front = K // 2
    pad_back = (S - 1) * (K // 2) + K - pad_front - L
    data = ad.half_overlap_windows(h, S, K, pad_front)
    return SegmentTensor(data, L, K, pad_front, pad_back)


def overlap_add(t: SegmentTensor) -> Tensor:
    """Exact inverse of segment(): windows summed at stride K/2, each frame
    divided by its coverage count, padding trimmed."""
    folded = ad.half_overlap_fold(t.data, t.frames, t.pad_front)
    cov = ad.fold_coverage(t.frames, t.count, t.segment_size, t.pad_front)
    return ad.div(folded, cov[:, None])


# -- sandglass merge / repeat ----------------------------------------------


def merge_factor(i: int, N: int) -> int:
    if not 1 <= i <= N:
        raise ConfigError(f"block index {i} outside 1..{N}")
    return 2 ** min(i, N - i + 1)


def merged_width(K: int, i: int, N: int) -> int:
    """K_MS = ceil(K / 2^(min(i, N-i+1) - 1))."""
    g = merge_factor(i, N)
    return -(-2 * K // g)


def merge_segments(data: Tensor, i: int, N: int) -> Tensor:
    """Average zero-padded windows of g columns at stride g/2.

    (..., S, K, D) -> (..., S, K_MS, D), dividing each window by g.
    """
    data = ad.as_tensor(data)
    K = data.data.shape[-2]
    g = merge_factor(i, N)
    k_ms = merged_width(K, i, N)
    windows = ad.half_overlap_windows(data, k_ms, g, g // 2)  # (..., S, K_MS, g, D)
    return ad.tmean(windows, axis=-2)


def repeat_segments(data: Tensor, i: int, N: int, K: int) -> Tensor:
    """Broadcast merged columns back over their window footprints.

    (..., S, K_MS, D) -> (..., S, K, D); positions covered by two windows
    average their contributions, the zero-padded fringe is trimmed.
    """
    data = ad.as_tensor(data)
    g = merge_factor(i, N)
    k_ms = merged_width(K, i, N)
    if data.data.shape[-2] != k_ms:
        raise ShapeError(f"expected {k_ms} merged columns for block {i}, "
                         f"got {data.data.shape[-2]}")
    s = data.data.shape
    widened = ad.broadcast_to(ad.reshape(data, s[:-1] + (1, s[-1])),
                              s[:-1] + (g, s[-1]))  # (..., S, K_MS, g, D)
    folded = ad.half_overlap_fold(widened, K, g // 2)
    cov = ad.fold_coverage(K, k_ms, g, g // 2)
    return ad.div(folded, cov[:, None])


# -- block parameters ---------------------------------------------------------


@dataclass
class BlockParams:
    index: int  # 1-based; fixes the sandglass merge factor
    coarse_norm1: Tensor
    self_attn: AttentionParams
    coarse_norm2: Tensor
    cross_attn: AttentionParams
    coarse_norm3: Tensor
    coarse_ffn: MlpBlock
    resid_norm_a: Tensor
    sru: SruParams
    film: FilmParams
    resid_norm_b: Tensor


def init_block(store: ParamStore, prefix: str, index: int, d_hid: int, heads: int,
               rng: np.random.Generator) -> BlockParams:
    return BlockParams(
        index=index,
        coarse_norm1=store.create(f"{prefix}.coarse.norm1.gain", np.ones(d_hid)),
        self_attn=init_attention(store, f"{prefix}.coarse.self_attn", d_hid, heads, rng),
        coarse_norm2=store.create(f"{prefix}.coarse.norm2.gain", np.ones(d_hid)),
        cross_attn=init_attention(store, f"{prefix}.coarse.cross_attn", d_hid, heads, rng),
        coarse_norm3=store.create(f"{prefix}.coarse.norm3.gain", np.ones(d_hid)),
        coarse_ffn=init_mlp(store, f"{prefix}.coarse.ffn", d_hid, d_hid, rng),
        resid_norm_a=store.create(f"{prefix}.resid_norm_a.gain", np.ones(d_hid)),
        sru=init_sru(store, f"{prefix}.fine.sru", d_hid, rng),
        film=init_film(store, f"{prefix}.fine.film", d_hid, rng),
        resid_norm_b=store.create(f"{prefix}.resid_norm_b.gain", np.ones(d_hid)),
    )


# -- paths ---------------------------------------------------------------------


def _roformer(x: Tensor, e_st: Tensor | None, p: BlockParams,
              unconditional) -> Tensor:
    """Pre-norm residual stack: self-attn, cross-attn (or its self-attention
    substitute on the unconditional branch), MLP. x: (..., S, D_hid).

    `unconditional` is a bool, or a per-example bool vector for batches that
    mix both branches (both attention variants are computed and selected
    per example)."""
    h = ad.add(x, rotary_self_attention(rmsnorm(x, p.coarse_norm1), p.self_attn))
    normed = rmsnorm(h, p.coarse_norm2)
    if isinstance(unconditional, np.ndarray):
        cond = cross_attention(normed, e_st, p.cross_attn)
        uncond = cross_attention(normed, normed, p.cross_attn)
        sel = unconditional.astype(np.float64).reshape(
            (-1,) + (1,) * (cond.data.ndim - 1))
        attended = ad.add(ad.mul(uncond, sel), ad.mul(cond, 1.0 - sel))
    elif unconditional:
        attended = cross_attention(normed, normed, p.cross_attn)
    else:
        attended = cross_attention(normed, e_st, p.cross_attn)
    h = ad.add(h, attended)
    return ad.add(h, mlp(rmsnorm(h, p.coarse_norm3), p.coarse_ffn))


def coarse_path(t: SegmentTensor, e_st: Tensor | None, p: BlockParams, N: int,
                unconditional=False) -> Tensor:
    """Merge columns, run the Roformer along the segment axis per column,
    repeat back to K columns. Returns a tensor shaped like t.data."""
    merged = merge_segments(t.data, p.index, N)           # (..., S, K_MS, D)
    cols = ad.swapaxes(merged, -3, -2)                    # (..., K_MS, S, D)
    kv = e_st
    if kv is not None and kv.data.ndim == 3:
        # batched tokens: broadcast across the column axis
        b, t_st, d = kv.data.shape
        kv = ad.reshape(kv, (b, 1, t_st, d))
    out = _roformer(cols, kv, p, unconditional)
    out = ad.swapaxes(out, -3, -2)                        # (..., S, K_MS, D)
    return repeat_segments(out, p.index, N, t.segment_size)


def film_modulation(e_delta: Tensor, e_st: Tensor, s_count: int, frames: int) -> Tensor:
    """Per-segment FiLM conditioning vector: E_delta[floor(s*L/S)] plus the
    pooled token embedding. Identical for every block, so computed once."""
    if e_delta.data.shape[-2] != frames:
        raise ShapeError(f"angle embedding covers {e_delta.data.shape[-2]} frames, "
                         f"expected {frames}")
    idx = (np.arange(s_count) * frames) // s_count
    rows = e_delta[(Ellipsis, idx, slice(None))]          # (..., S, D)
    pooled = pooled_tokens(e_st)
    if pooled.data.ndim == 2:
        pooled = ad.reshape(pooled, (pooled.data.shape[0], 1, pooled.data.shape[1]))
    return ad.add(rows, pooled)


def fine_path(t_in: Tensor, e_delta: Tensor, e_st: Tensor, p: BlockParams,
              frames: int, mod: Tensor | None = None) -> Tensor:
    """Bidirectional SRU within each segment, then FiLM conditioned on the
    segment's angle embedding row plus the pooled token embedding."""
    if mod is None:
        mod = film_modulation(e_delta, e_st, t_in.data.shape[-3], frames)
    h = sru_bidirectional(t_in, p.sru)
    return film(h, mod, p.film)


def dual_path_block(t: SegmentTensor, e_delta: Tensor, e_st: Tensor, p: BlockParams,
                    N: int, unconditional=False,
                    mod: Tensor | None = None) -> SegmentTensor:
    """coarse path -> residual RMSNorm -> fine path -> residual RMSNorm."""
    c_out = coarse_path(t, e_st, p, N, unconditional)
    f_in = rmsnorm(ad.add(t.data, c_out), p.resid_norm_a)
    f_out = fine_path(f_in, e_delta, e_st, p, t.frames, mod=mod)
    nxt = rmsnorm(ad.add(f_in, f_out), p.resid_norm_b)
    return SegmentTensor(nxt, t.frames, t.segment_size, t.pad_front, t.pad_back)


# -- full model -----------------------------------------------------------------


@dataclass
class DpdModel:
    config: DpdConfig
    store: ParamStore
    angle_enc: AngleEncoderParams
    token_enc: TokenEncoderParams
    w_in: Tensor
    in_norm: Tensor
    blocks: list[BlockParams] = field(default_factory=list)
    out_norm: Tensor = None
    w_out: Tensor = None

    @classmethod
    def init(cls, config: DpdConfig) -> "DpdModel":
        rng = np.random.default_rng(config.seed)
        store = ParamStore()
        angle_enc = init_angle_encoder(store, "angle_enc", config.hidden_dim, rng,
                                       mode=config.angle_encoder_mode)
        token_enc = init_token_encoder(store, "token_enc", config.vocab,
                                       config.hidden_dim, rng)
        w_in = store.create("w_in", matrix_init(rng, config.latent_dim, config.hidden_dim))
        in_norm = store.create("in_norm.gain", np.ones(config.hidden_dim))
        blocks = [init_block(store, f"block{i:02d}", i, config.hidden_dim,
                             config.heads, rng)
                  for i in range(1, config.block_count + 1)]
        out_norm = store.create("out_norm.gain", np.ones(config.hidden_dim))
        w_out = store.create("w_out", matrix_init(rng, config.hidden_dim,
                                                  config.latent_dim))
        return cls(config, store, angle_enc, token_enc, w_in, in_norm, blocks,
                   out_norm, w_out)

    def velocity(self, z, angle_vector, tokens, unconditional: bool = False) -> np.ndarray:
        """Inference-only forward pass returning a plain array."""
        with ad.no_grad():
            return velocity_forward(z, angle_vector, tokens, self,
                                    unconditional=unconditional).data


def velocity_forward(z_in, angle_vector, tokens, model: DpdModel,
                     unconditional=False) -> Tensor:
    """Predict the velocity for (..., L, D) latents.

    angle_vector: (..., L) per-frame noise angles; tokens: (..., T_ST) ids.
    `unconditional` selects the guidance branch: a bool for the whole call,
    or a per-example bool vector for 3-D batches.
    """
    cfg = model.config
    z = ad.as_tensor(z_in)
    if z.data.ndim not in (2, 3):
        raise ShapeError(f"expected (L, D) or (B, L, D) input, got {z.data.shape}")
    if z.data.shape[-1] != cfg.latent_dim:
        raise ShapeError(f"latent dim {z.data.shape[-1]} != configured {cfg.latent_dim}")
    angle_vector = np.asarray(angle_vector, dtype=np.float64)
    if angle_vector.shape != z.data.shape[:-1]:
        raise ShapeError(f"angle vector shape {angle_vector.shape} does not match "
                         f"latent frames {z.data.shape[:-1]}")
    if isinstance(unconditional, np.ndarray):
        if z.data.ndim != 3 or unconditional.shape != (z.data.shape[0],):
            raise ShapeError("per-example branch mask requires a batched input "
                             "and one flag per example")

    e_delta = encode_angles(angle_vector, model.angle_enc)
    e_st = encode_tokens(tokens, model.token_enc)
    if e_st.data.ndim != z.data.ndim:
        raise ShapeError("token batch dims do not match latent batch dims")

    h = rmsnorm(ad.add(ad.matmul(z, model.w_in), e_delta), model.in_norm)
    t = segment(h, cfg.segment_size)
    mod = film_modulation(e_delta, e_st, t.count, t.frames)
    for p in model.blocks:
        t = dual_path_block(t, e_delta, e_st, p, cfg.block_count,
                            unconditional=unconditional, mod=mod)
    out = rmsnorm(overlap_add(t), model.out_norm)
    return ad.matmul(out, model.w_out)
