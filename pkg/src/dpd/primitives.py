"""Differentiable building blocks of the velocity network.

Everything operates on autodiff Tensors so analytic gradients are available
end to end; each block is verified against central finite differences in
the test suite and the `verify gradients` harness.

Blocks: RMSNorm, the RMSNorm/GELU MLP, FiLM modulation, a bidirectional
two-layer SRU stack, and rotary-embedding attention (self and cross).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

RMSNORM_EPS = 1e-8


class ParamStore:
    """Named parameter tensors with their gradient accumulators.

    Names are unique; iteration order is creation order, which fixes both
    the checkpoint layout and the optimizer update order.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def total_parameters(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._tensors.values())


# -- initializers -----------------------------------------------------------


def matrix_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Normal(0, 1/fan_in) weight matrix."""
    return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)


def embedding_init(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    return rng.standard_normal((rows, dim))


# -- RMSNorm ------------------------------------------------------------------


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    """Per-row x / sqrt(mean(x^2) + eps) * gain along the last axis."""
    x = ad.as_tensor(x)
    gain = ad.as_tensor(gain)
    if gain.data.shape != (x.data.shape[-1],):
        raise ShapeError(
            f"gain length {gain.data.shape} does not match last dim {x.data.shape[-1]}")
    return ad.rmsnorm_fused(x, gain, RMSNORM_EPS)


def gelu(x: Tensor) -> Tensor:
    """Exact x * Phi(x) via the error function."""
    return ad.gelu(ad.as_tensor(x))


# -- MLP block ----------------------------------------------------------------


@dataclass
class MlpBlock:
    """RMSNorm(W2 GELU(x W1 + b1) + b2): projects any D_in to D_hid."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    gain: Tensor

    @property
    def d_in(self) -> int:
        return self.w1.data.shape[0]

    @property
    def d_hid(self) -> int:
        return self.w1.data.shape[1]


def init_mlp(store: ParamStore, prefix: str, d_in: int, d_hid: int,
             rng: np.random.Generator) -> MlpBlock:
    return MlpBlock(
        w1=store.create(f"{prefix}.w1", matrix_init(rng, d_in, d_hid)),
        b1=store.create(f"{prefix}.b1", np.zeros(d_hid)),
        w2=store.create(f"{prefix}.w2", matrix_init(rng, d_hid, d_hid)),
        b2=store.create(f"{prefix}.b2", np.zeros(d_hid)),
        gain=store.create(f"{prefix}.gain", np.ones(d_hid)),
    )


def mlp(x: Tensor, block: MlpBlock) -> Tensor:
    x = ad.as_tensor(x)
    if x.data.shape[-1] != block.d_in:
        raise ShapeError(f"mlp expects last dim {block.d_in}, got {x.data.shape[-1]}")
    h = ad.gelu(ad.affine(x, block.w1, block.b1))
    return rmsnorm(ad.affine(h, block.w2, block.b2), block.gain)


# -- FiLM ---------------------------------------------------------------------


@dataclass
class FilmParams:
    mlp1: MlpBlock  # scale
    mlp2: MlpBlock  # shift
    mlp3: MlpBlock  # output


def init_film(store: ParamStore, prefix: str, d_hid: int,
              rng: np.random.Generator) -> FilmParams:
    return FilmParams(
        mlp1=init_mlp(store, f"{prefix}.mlp1", d_hid, d_hid, rng),
        mlp2=init_mlp(store, f"{prefix}.mlp2", d_hid, d_hid, rng),
        mlp3=init_mlp(store, f"{prefix}.mlp3", d_hid, d_hid, rng),
    )


def film(x: Tensor, m: Tensor, params: FilmParams) -> Tensor:
    """MLP3((x * MLP1(m)) + MLP2(m)) with m broadcast over the row axis.

    x: (..., K, D_hid); m: (..., D_hid) or (D_hid,).
    """
    x = ad.as_tensor(x)
    m = ad.as_tensor(m)
    if x.data.shape[-1] != params.mlp1.d_in or m.data.shape[-1] != params.mlp1.d_in:
        raise ShapeError("film width mismatch")
    scale = mlp(m, params.mlp1)
    shift = mlp(m, params.mlp2)
    if scale.data.ndim:
        new_shape = scale.data.shape[:-1] + (1, scale.data.shape[-1])
        scale = ad.reshape(scale, new_shape)
        shift = ad.reshape(shift, new_shape)
    return mlp(ad.add(ad.mul(x, scale), shift), params.mlp3)


# -- SRU ------------------------------------------------------------------------


@dataclass
class SruLayerParams:
    w: Tensor
    wf: Tensor
    wr: Tensor
    vf: Tensor
    vr: Tensor
    bf: Tensor
    br: Tensor
    wh: Tensor | None = None  # highway projection, only when d_in != d_out


@dataclass
class SruParams:
    """Two stacked layers per direction; direction outputs concatenate."""

    forward: list[SruLayerParams] = field(default_factory=list)
    backward: list[SruLayerParams] = field(default_factory=list)

    @property
    def d_out(self) -> int:
        return 2 * self.forward[-1].w.data.shape[1]


def _init_sru_layer(store: ParamStore, prefix: str, d_in: int, d_out: int,
                    rng: np.random.Generator) -> SruLayerParams:
    wh = None
    if d_in != d_out:
        wh = store.create(f"{prefix}.wh", matrix_init(rng, d_in, d_out))
    return SruLayerParams(
        w=store.create(f"{prefix}.w", matrix_init(rng, d_in, d_out)),
        wf=store.create(f"{prefix}.wf", matrix_init(rng, d_in, d_out)),
        wr=store.create(f"{prefix}.wr", matrix_init(rng, d_in, d_out)),
        vf=store.create(f"{prefix}.vf", rng.standard_normal(d_out) / np.sqrt(d_out)),
        vr=store.create(f"{prefix}.vr", rng.standard_normal(d_out) / np.sqrt(d_out)),
        bf=store.create(f"{prefix}.bf", np.zeros(d_out)),
        br=store.create(f"{prefix}.br", np.zeros(d_out)),
        wh=wh,
    )


def init_sru(store: ParamStore, prefix: str, d_model: int,
             rng: np.random.Generator) -> SruParams:
    if d_model % 2 != 0:
        raise ConfigError(f"bidirectional SRU needs an even width, got {d_model}")
    half = d_model // 2
    params = SruParams()
    for direction, layers in (("fwd", params.forward), ("bwd", params.backward)):
        layers.append(_init_sru_layer(store, f"{prefix}.{direction}.l1", d_model, half, rng))
        layers.append(_init_sru_layer(store, f"{prefix}.{direction}.l2", half, half, rng))
    return params


def _reverse_time(x: Tensor) -> Tensor:
    return x[(Ellipsis, slice(None, None, -1), slice(None))]


def _sru_layer(x: Tensor, p: SruLayerParams) -> Tensor:
    """One SRU layer over x: (..., K, d_in) -> (..., K, d_out), c_0 = 0.

    f_t = logistic(W_f x_t + v_f c_{t-1} + b_f)
    r_t = logistic(W_r x_t + v_r c_{t-1} + b_r)
    c_t = f_t c_{t-1} + (1 - f_t) (W x_t)
    h_t = r_t c_t + (1 - r_t) x~_t      (x~ = x, or x W_h when widths differ)
    """
    u = ad.matmul(x, ad.concat([p.w, p.wf, p.wr], axis=-1))  # one GEMM, 3 gates
    highway = x if p.wh is None else ad.matmul(x, p.wh)
    return ad.sru_recurrence(u, p.vf, p.vr, p.bf, p.br, highway)


def _sru_direction(x: Tensor, layers: list[SruLayerParams]) -> Tensor:
    h = x
    for p in layers:
        h = _sru_layer(h, p)
    return h


def sru_bidirectional(x: Tensor, params: SruParams) -> Tensor:
    """Two-layer SRU in each time direction, outputs concatenated.

    x: (..., K, D_hid) -> (..., K, D_hid); each direction contributes
    D_hid/2 channels and sees the full-width input.
    """
    x = ad.as_tensor(x)
    if x.data.shape[-1] % 2 != 0:
        raise ConfigError("bidirectional SRU needs an even input width")
    fwd = _sru_direction(x, params.forward)
    bwd = _reverse_time(_sru_direction(_reverse_time(x), params.backward))
    return ad.concat([fwd, bwd], axis=-1)


# -- rotary attention -------------------------------------------------------------


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    @property
    def d_model(self) -> int:
        return self.wq.data.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


def init_attention(store: ParamStore, prefix: str, d_model: int, heads: int,
                   rng: np.random.Generator) -> AttentionParams:
    if d_model % heads != 0:
        raise ConfigError(f"width {d_model} not divisible by {heads} heads")
    if (d_model // heads) % 2 != 0:
        raise ConfigError(f"head dim {d_model // heads} must be even for rotary embedding")
    return AttentionParams(
        wq=store.create(f"{prefix}.wq", matrix_init(rng, d_model, d_model)),
        wk=store.create(f"{prefix}.wk", matrix_init(rng, d_model, d_model)),
        wv=store.create(f"{prefix}.wv", matrix_init(rng, d_model, d_model)),
        wo=store.create(f"{prefix}.wo", matrix_init(rng, d_model, d_model)),
        heads=heads,
    )


_ROTARY_CACHE: dict = {}


def rotary_tables(positions: np.ndarray, d_head: int):
    """cos/sin tables for pairwise rotation by p * theta_k, theta_k = 10000^(-2k/d)."""
    positions = np.asarray(positions, dtype=np.float64)
    key = (d_head, positions.tobytes())
    hit = _ROTARY_CACHE.get(key)
    if hit is not None:
        return hit
    k = np.arange(d_head // 2, dtype=np.float64)
    theta = 10000.0 ** (-2.0 * k / d_head)
    ang = positions[:, None] * theta[None, :]
    tables = (np.cos(ang), np.sin(ang))
    if len(_ROTARY_CACHE) < 256:
        _ROTARY_CACHE[key] = tables
    return tables


def _apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs of the last axis; x: (..., T, d_head)."""
    return ad.rotary_fused(x, cos, sin)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    t, d = x.data.shape[-2], x.data.shape[-1]
    x = ad.reshape(x, x.data.shape[:-1] + (heads, d // heads))
    return ad.swapaxes(x, -3, -2)  # (..., heads, T, d_head)


def _merge_heads(x: Tensor) -> Tensor:
    x = ad.swapaxes(x, -3, -2)  # (..., T, heads, d_head)
    s = x.data.shape
    return ad.reshape(x, s[:-2] + (s[-2] * s[-1],))


def _attend(x_q: Tensor, x_kv: Tensor, params: AttentionParams,
            q_positions: np.ndarray, k_positions: np.ndarray) -> Tensor:
    d = params.d_model
    if x_q.data.shape[-1] != d or x_kv.data.shape[-1] != d:
        raise ShapeError("attention width mismatch")
    q = _split_heads(ad.matmul(x_q, params.wq), params.heads)
    k = _split_heads(ad.matmul(x_kv, params.wk), params.heads)
    v = _split_heads(ad.matmul(x_kv, params.wv), params.heads)
    cos_q, sin_q = rotary_tables(q_positions, params.d_head)
    cos_k, sin_k = rotary_tables(k_positions, params.d_head)
    # fold the 1/sqrt(d) logit scaling into q (cheaper than scaling logits)
    q = ad.mul(_apply_rotary(q, cos_q, sin_q), 1.0 / np.sqrt(params.d_head))
    k = _apply_rotary(k, cos_k, sin_k)
    attn = ad.softmax_last(ad.matmul(q, ad.swapaxes(k, -1, -2)))
    out = _merge_heads(ad.matmul(attn, v))
    return ad.matmul(out, params.wo)


def rotary_self_attention(x: Tensor, params: AttentionParams,
                          positions: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention with rotary position embedding.

    x: (..., T, D_hid). Positions default to 0..T-1; attention logits depend
    only on relative positions.
    """
    x = ad.as_tensor(x)
    if positions is None:
        positions = np.arange(x.data.shape[-2])
    return _attend(x, x, params, positions, positions)


def cross_attention(x: Tensor, context: Tensor, params: AttentionParams,
                    q_positions: np.ndarray | None = None,
                    k_positions: np.ndarray | None = None) -> Tensor:
    """Queries from x, keys/values from context, each with own positions."""
    x = ad.as_tensor(x)
    context = ad.as_tensor(context)
    if q_positions is None:
        q_positions = np.arange(x.data.shape[-2])
    if k_positions is None:
        k_positions = np.arange(context.data.shape[-2])
    return _attend(x, context, params, q_positions, k_positions)
