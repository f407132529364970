"""Encoders for the two conditioning signals: noise angles and semantic tokens.

The angle encoder interpolates two learnable 256-wide basis vectors per
frame and projects with an MLP block; the token encoder is an embedding
table followed by an MLP block. Token ids are 1-based externally
(1..V_ST) and mapped to 0-based table rows internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, TokenError
from .primitives import MlpBlock, ParamStore, embedding_init, init_mlp, mlp
from .schedule import HALF_PI

ANGLE_BASIS_DIM = 256

ANGLE_ENCODER_MODES = ("slerp", "verbatim")


@dataclass
class AngleEncoderParams:
    e_start: Tensor  # 256-vector
    e_end: Tensor    # 256-vector
    mlp: MlpBlock    # 256 -> D_hid
    mode: str = "slerp"


@dataclass
class TokenEncoderParams:
    table: Tensor    # V_ST x D_hid
    mlp: MlpBlock    # D_hid -> D_hid

    @property
    def vocab(self) -> int:
        return self.table.data.shape[0]


def init_angle_encoder(store: ParamStore, prefix: str, d_hid: int,
                       rng: np.random.Generator, mode: str = "slerp") -> AngleEncoderParams:
    if mode not in ANGLE_ENCODER_MODES:
        raise ConfigError(f"unknown angle encoder mode {mode!r}")
    return AngleEncoderParams(
        e_start=store.create(f"{prefix}.e_start", rng.standard_normal(ANGLE_BASIS_DIM)),
        e_end=store.create(f"{prefix}.e_end", rng.standard_normal(ANGLE_BASIS_DIM)),
        mlp=init_mlp(store, f"{prefix}.mlp", ANGLE_BASIS_DIM, d_hid, rng),
        mode=mode,
    )


def init_token_encoder(store: ParamStore, prefix: str, vocab: int, d_hid: int,
                       rng: np.random.Generator) -> TokenEncoderParams:
    if vocab < 1:
        raise ConfigError(f"vocabulary size must be >= 1, got {vocab}")
    return TokenEncoderParams(
        table=store.create(f"{prefix}.table", embedding_init(rng, vocab, d_hid)),
        mlp=init_mlp(store, f"{prefix}.mlp", d_hid, d_hid, rng),
    )


def _check_angles(angle_vector: np.ndarray) -> np.ndarray:
    angle_vector = np.asarray(angle_vector, dtype=np.float64)
    if np.any(angle_vector < 0.0) or np.any(angle_vector > HALF_PI):
        raise DataError("angle vector entries must lie in [0, pi/2]")
    return angle_vector


def interpolate_angles(angle_vector, params: AngleEncoderParams) -> Tensor:
    """Per-frame pre-MLP basis mix, (..., L) -> (..., L, 256).

    mode "slerp":    cos(d) * e_start + sin(d) * e_end
    mode "verbatim": sin(d) * e_start + sin(d) * e_end
    """
    angle_vector = _check_angles(angle_vector)
    sin_d = np.sin(angle_vector)[..., None]
    if params.mode == "slerp":
        first = np.cos(angle_vector)[..., None]
    elif params.mode == "verbatim":
        first = sin_d
    else:
        raise ConfigError(f"unknown angle encoder mode {params.mode!r}")
    return ad.add(ad.mul(ad.constant(first), params.e_start),
                  ad.mul(ad.constant(sin_d), params.e_end))


def encode_angles(angle_vector, params: AngleEncoderParams) -> Tensor:
    """Frame-level angle embedding E_delta: (..., L) -> (..., L, D_hid).

    The encoder is framewise, so only the distinct angles are pushed through
    the MLP and the rows are gathered back out; condition vectors are
    piecewise constant (M chunks), making this much cheaper than L rows.
    """
    angle_vector = _check_angles(angle_vector)
    flat = angle_vector.reshape(-1)
    uniq, inverse = np.unique(flat, return_inverse=True)
    encoded = mlp(interpolate_angles(uniq, params), params.mlp)
    rows = encoded[inverse.reshape(-1)]
    d_hid = encoded.data.shape[-1]
    return ad.reshape(rows, angle_vector.shape + (d_hid,))


def _check_tokens(tokens, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size < 1:
        raise TokenError("token sequence must be non-empty")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TokenError(f"token ids must be integers, got dtype {tokens.dtype}")
    if np.any(tokens < 1) or np.any(tokens > vocab):
        raise TokenError(f"token ids must lie in 1..{vocab}")
    return tokens.astype(np.int64)


def encode_tokens(tokens, params: TokenEncoderParams) -> Tensor:
    """Token embedding E_ST: ids (..., T_ST) -> (..., T_ST, D_hid)."""
    tokens = _check_tokens(tokens, params.vocab)
    rows = params.table[tokens - 1]
    return mlp(rows, params.mlp)


def pooled_tokens(e_st: Tensor) -> Tensor:
    """Arithmetic mean over the token axis: (..., T_ST, D) -> (..., D)."""
    return ad.tmean(e_st, axis=-2)
