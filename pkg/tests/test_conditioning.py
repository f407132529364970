import math

import numpy as np
import pytest

from dpd import autodiff as ad
from dpd import conditioning as cond
from dpd import primitives as pr
from dpd.errors import DataError, TokenError
from dpd.gradcheck import FD_STEP, REL_TOL, max_rel_error, probe_coords

from oracles import oracle_mlp

HALF_PI = math.pi / 2


def make_encoders(rng, d_hid=4, vocab=7, mode="slerp"):
    store = pr.ParamStore()
    ang = cond.init_angle_encoder(store, "angle", d_hid, rng, mode=mode)
    tok = cond.init_token_encoder(store, "token", vocab, d_hid, rng)
    return store, ang, tok


def test_constant_angle_vector_gives_identical_rows():
    rng = np.random.default_rng(0)
    store, ang, _ = make_encoders(rng)
    out = cond.encode_angles(np.full(5, 0.7), ang).data
    assert np.max(np.abs(out - out[0])) == 0.0


def test_slerp_endpoints():
    rng = np.random.default_rng(1)
    store, ang, _ = make_encoders(rng)
    pre = cond.interpolate_angles(np.array([0.0, HALF_PI]), ang).data
    assert np.max(np.abs(pre[0] - ang.e_start.data)) < 1e-15
    assert np.max(np.abs(pre[1] - ang.e_end.data)) < 1e-15


def test_verbatim_mode_double_sin():
    rng = np.random.default_rng(2)
    store, ang, _ = make_encoders(rng, mode="verbatim")
    d = 0.4
    pre = cond.interpolate_angles(np.array([d]), ang).data[0]
    expect = math.sin(d) * ang.e_start.data + math.sin(d) * ang.e_end.data
    assert np.max(np.abs(pre - expect)) < 1e-15


def test_encode_angles_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    store, ang, _ = make_encoders(rng, d_hid=4)
    vec = np.array([0.0, 0.3, 1.1])
    out = cond.encode_angles(vec, ang).data
    pre = np.stack([np.cos(d) * ang.e_start.data + np.sin(d) * ang.e_end.data for d in vec])
    expect = oracle_mlp(pre, ang.mlp.w1.data, ang.mlp.b1.data, ang.mlp.w2.data,
                        ang.mlp.b2.data, ang.mlp.gain.data)
    assert np.max(np.abs(out - expect)) < 1e-12


def test_encode_angles_framewise_permutation():
    rng = np.random.default_rng(4)
    store, ang, _ = make_encoders(rng)
    vec = rng.uniform(0, HALF_PI, size=6)
    perm = rng.permutation(6)
    base = cond.encode_angles(vec, ang).data
    permuted = cond.encode_angles(vec[perm], ang).data
    assert np.array_equal(permuted, base[perm])


def test_encode_angles_range_error():
    rng = np.random.default_rng(5)
    store, ang, _ = make_encoders(rng)
    with pytest.raises(DataError):
        cond.encode_angles(np.array([-0.1]), ang)
    with pytest.raises(DataError):
        cond.encode_angles(np.array([HALF_PI + 0.2]), ang)


def test_encode_tokens_examples():
    rng = np.random.default_rng(6)
    store, _, tok = make_encoders(rng)
    rep = cond.encode_tokens(np.array([3, 3, 3]), tok).data
    assert np.max(np.abs(rep - rep[0])) == 0.0
    single = cond.encode_tokens(np.array([1]), tok).data
    assert single.shape == (1, 4)


def test_encode_tokens_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    store, _, tok = make_encoders(rng, vocab=5)
    ids = np.array([1, 4, 2])
    out = cond.encode_tokens(ids, tok).data
    expect = oracle_mlp(tok.table.data[ids - 1], tok.mlp.w1.data, tok.mlp.b1.data,
                        tok.mlp.w2.data, tok.mlp.b2.data, tok.mlp.gain.data)
    assert np.max(np.abs(out - expect)) < 1e-12


def test_encode_tokens_tokenwise():
    rng = np.random.default_rng(8)
    store, _, tok = make_encoders(rng)
    a = cond.encode_tokens(np.array([2, 5, 1]), tok).data
    b = cond.encode_tokens(np.array([9 - 7, 5, 3]), tok).data  # same first two ids
    assert np.array_equal(a[:2], b[:2])


def test_encode_tokens_id_errors():
    rng = np.random.default_rng(9)
    store, _, tok = make_encoders(rng, vocab=7)
    with pytest.raises(TokenError):
        cond.encode_tokens(np.array([0]), tok)
    with pytest.raises(TokenError):
        cond.encode_tokens(np.array([8]), tok)
    with pytest.raises(TokenError):
        cond.encode_tokens(np.array([]), tok)


def test_pooled_tokens_examples():
    one = ad.Tensor(np.array([[1.0, 2.0, 3.0]]))
    assert np.array_equal(cond.pooled_tokens(one).data, [1.0, 2.0, 3.0])
    two = ad.Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert np.array_equal(cond.pooled_tokens(two).data, [0.5, 0.5])
    rng = np.random.default_rng(10)
    m = rng.standard_normal((5, 3))
    assert np.max(np.abs(cond.pooled_tokens(ad.Tensor(m)).data - m.mean(axis=0))) < 1e-15


def test_encoder_gradients():
    rng = np.random.default_rng(11)
    store, ang, tok = make_encoders(rng, d_hid=4, vocab=5)
    vec = np.array([0.2, 0.9])
    ids = np.array([2, 2, 4])
    probe_a = rng.standard_normal((2, 4))
    probe_t = rng.standard_normal(4)

    def loss():
        ea = cond.encode_angles(vec, ang)
        et = cond.pooled_tokens(cond.encode_tokens(ids, tok))
        return ad.add(ad.tsum(ad.mul(ea, probe_a)), ad.tsum(ad.mul(et, probe_t)))

    store.zero_grad()
    loss().backward()
    worst = 0.0
    for name, t in store.items():
        coords = probe_coords(t.data.shape, rng, 4)
        saved = t.data.copy()

        def f(x, _t=t):
            _t.data = x
            val = float(loss().data)
            _t.data = saved
            return val

        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = max_rel_error(f, saved, grad, coords=coords, h=FD_STEP)
        worst = max(worst, err)
    assert worst < REL_TOL
