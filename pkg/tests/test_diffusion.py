import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpd import diffusion as df
from dpd.errors import DataError, ShapeError

HALF_PI = math.pi / 2


# -- chunk layout ----------------------------------------------------------

def test_chunk_boundaries_production_constant():
    layout = df.chunk_boundaries(2500, 4)
    assert layout.boundaries.tolist() == [0, 625, 1250, 1875, 2500]


def test_chunk_boundaries_examples():
    assert df.chunk_boundaries(10, 1).boundaries.tolist() == [0, 10]
    assert df.chunk_boundaries(7, 3).boundaries.tolist() == [0, 2, 4, 7]


def test_chunk_boundaries_cover_disjointly():
    layout = df.chunk_boundaries(29, 5)
    covered = np.concatenate([np.arange(sl.start, sl.stop) for sl in layout.slices()])
    assert covered.tolist() == list(range(29))


def test_chunk_boundaries_rejects_empty_chunks():
    with pytest.raises(DataError):
        df.chunk_boundaries(3, 4)
    with pytest.raises(DataError):
        df.chunk_boundaries(5, 0)


# -- forward diffusion -----------------------------------------------------

def test_forward_diffuse_boundaries():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((6, 3))
    eps = rng.standard_normal((6, 3))
    assert np.array_equal(df.forward_diffuse(z, eps, 0.0), z)
    assert np.array_equal(df.forward_diffuse(z, eps, HALF_PI),
                          math.cos(HALF_PI) * z + eps)  # cos(pi/2) ~ 6e-17


def test_forward_diffuse_quarter():
    out = df.forward_diffuse(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), math.pi / 4)
    assert np.allclose(out, [[0.70710678, 0.70710678]], atol=1e-8, rtol=0)


def test_forward_diffuse_shape_error():
    with pytest.raises(ShapeError):
        df.forward_diffuse(np.zeros((3, 2)), np.zeros((2, 2)), 0.1)


def test_forward_diffuse_variance_preserving():
    rng = np.random.default_rng(7)
    n = 100_000
    z = rng.standard_normal((n, 1))
    eps = rng.standard_normal((n, 1))
    out = df.forward_diffuse(z, eps, 0.9)
    # Var = cos^2 + sin^2 = 1; sample variance has sd ~ sqrt(2/n)
    assert abs(out.var() - 1.0) < 3 * math.sqrt(2 / n)


# -- transition kernel -----------------------------------------------------

def test_transition_kernel_marginal_case():
    for dt in (0.3, 1.0, HALF_PI):
        mc, var = df.transition_kernel_params(0.0, dt)
        assert abs(mc - math.cos(dt)) < 1e-15
        assert abs(var - math.sin(dt) ** 2) < 1e-15


def test_transition_kernel_values():
    mc, var = df.transition_kernel_params(math.pi / 6, math.pi / 3)
    assert abs(mc - 0.5773502691896258) < 1e-12
    assert abs(var - 2.0 / 3.0) < 1e-12


def test_transition_kernel_errors():
    with pytest.raises(DataError):
        df.transition_kernel_params(0.5, 0.5)
    with pytest.raises(DataError):
        df.transition_kernel_params(0.8, 0.2)


def test_transition_kernel_composition_monte_carlo():
    # diffusing with (delta_s, then s->t) must match the marginal q(z_t | z)
    rng = np.random.default_rng(42)
    n = 100_000
    ds, dt = 0.4, 1.1
    z = np.full((n, 1), 0.7)
    zs = df.forward_diffuse(z, rng.standard_normal((n, 1)), ds)
    mc, var = df.transition_kernel_params(ds, dt)
    zt = mc * zs + math.sqrt(var) * rng.standard_normal((n, 1))
    # marginal moments: mean cos(dt)*0.7, variance sin(dt)^2
    se_mean = 1.0 / math.sqrt(n)
    assert abs(zt.mean() - math.cos(dt) * 0.7) < 3 * se_mean
    assert abs(zt.var() - math.sin(dt) ** 2) < 3 * math.sqrt(2 / n)


# -- multi-chunk construction ----------------------------------------------

@pytest.fixture
def chunk_instance():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 2))
    eps = rng.standard_normal((4, 2))
    layout = df.chunk_boundaries(4, 2)
    return z, eps, layout


def test_multichunk_single_chunk_degeneracy():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((10, 3))
    eps = rng.standard_normal((10, 3))
    layout = df.chunk_boundaries(10, 1)
    out = df.build_multichunk_noisy(z, eps, layout, [0.8])
    assert np.array_equal(out, df.forward_diffuse(z, eps, 0.8))
    v = df.build_velocity_target(z, eps, layout, [0.8])
    assert np.array_equal(v, math.cos(0.8) * eps - math.sin(0.8) * z)


def test_multichunk_zero_angles_identity(chunk_instance):
    z, eps, layout = chunk_instance
    assert np.array_equal(df.build_multichunk_noisy(z, eps, layout, [0.0, 0.0]), z)


def test_multichunk_extreme_angles(chunk_instance):
    z, eps, layout = chunk_instance
    out = df.build_multichunk_noisy(z, eps, layout, [0.0, HALF_PI])
    assert np.array_equal(out[:2], z[:2])
    assert np.allclose(out[2:], eps[2:], atol=1e-15, rtol=0)


def test_velocity_target_extremes(chunk_instance):
    z, eps, layout = chunk_instance
    v0 = df.build_velocity_target(z, eps, layout, [0.0, 0.0])
    assert np.array_equal(v0, eps)
    v1 = df.build_velocity_target(z, eps, layout, [HALF_PI, HALF_PI])
    assert np.allclose(v1, -z, atol=1e-15, rtol=0)


def test_velocity_target_scalar_oracle(chunk_instance):
    z, eps, layout = chunk_instance
    angles = [math.pi / 6, math.pi / 3]
    v = df.build_velocity_target(z, eps, layout, angles)
    zn = df.build_multichunk_noisy(z, eps, layout, angles)
    for l in range(4):
        m = 0 if l < 2 else 1
        for d in range(2):
            expect_v = math.cos(angles[m]) * eps[l, d] - math.sin(angles[m]) * z[l, d]
            expect_n = math.cos(angles[m]) * z[l, d] + math.sin(angles[m]) * eps[l, d]
            assert abs(v[l, d] - expect_v) < 1e-15
            assert abs(zn[l, d] - expect_n) < 1e-15


def test_chunk_locality():
    rng = np.random.default_rng(11)
    z = rng.standard_normal((12, 2))
    eps = rng.standard_normal((12, 2))
    layout = df.chunk_boundaries(12, 3)
    base = df.build_multichunk_noisy(z, eps, layout, [0.3, 0.6, 0.9])
    tweak = df.build_multichunk_noisy(z, eps, layout, [0.3, 1.2, 0.9])
    changed = np.any(base != tweak, axis=1)
    assert not changed[:4].any() and changed[4:8].any() and not changed[8:].any()


# -- velocity algebra ------------------------------------------------------

@given(st.floats(min_value=0.0, max_value=HALF_PI))
@settings(max_examples=40, deadline=None)
def test_round_trip_recovers_z_and_eps(delta):
    rng = np.random.default_rng(17)
    z = rng.standard_normal((5, 3))
    eps = rng.standard_normal((5, 3))
    z_delta = df.forward_diffuse(z, eps, delta)
    v = math.cos(delta) * eps - math.sin(delta) * z
    assert np.max(np.abs(df.z_from_v(z_delta, v, delta) - z)) < 1e-12
    assert np.max(np.abs(df.eps_from_v(z_delta, v, delta) - eps)) < 1e-12


def test_z_from_v_at_zero():
    rng = np.random.default_rng(2)
    zd = rng.standard_normal((3, 2))
    v = rng.standard_normal((3, 2))
    assert np.array_equal(df.z_from_v(zd, v, 0.0), zd - 0.0 * v)


def test_eps_from_v_at_half_pi():
    rng = np.random.default_rng(2)
    zd = rng.standard_normal((3, 2))
    v = rng.standard_normal((3, 2))
    out = df.eps_from_v(zd, v, HALF_PI)
    assert np.allclose(out, zd, atol=1e-15, rtol=0)


# -- loss -------------------------------------------------------------------

def test_loss_zero_on_match():
    a = np.ones((3, 2))
    assert df.diffusion_loss(a, a) == 0.0


def test_loss_definition():
    assert df.diffusion_loss(np.zeros((1, 1)), np.array([[2.0]])) == 4.0


def test_loss_scalar_oracle():
    rng = np.random.default_rng(23)
    vt = rng.standard_normal((4, 2))
    vh = rng.standard_normal((4, 2))
    expect = 0.0
    for l in range(4):
        for d in range(2):
            expect += (vh[l, d] - vt[l, d]) ** 2
    assert abs(df.diffusion_loss(vt, vh) - expect) < 1e-12


def test_loss_batched_mean_over_batch():
    rng = np.random.default_rng(29)
    vt = rng.standard_normal((3, 4, 2))
    vh = rng.standard_normal((3, 4, 2))
    per = [df.diffusion_loss(vt[b], vh[b]) for b in range(3)]
    assert abs(df.diffusion_loss(vt, vh) - sum(per) / 3) < 1e-12


# -- angle vector ------------------------------------------------------------

def test_angle_vector_examples():
    layout = df.chunk_boundaries(4, 2)
    assert df.build_angle_vector(layout, [0.1, 0.2]).tolist() == [0.1, 0.1, 0.2, 0.2]
    layout1 = df.chunk_boundaries(9, 1)
    assert np.array_equal(df.build_angle_vector(layout1, [0.5]), np.full(9, 0.5))
    layout3 = df.chunk_boundaries(7, 3)
    vec = df.build_angle_vector(layout3, [0.1, 0.2, 0.3])
    assert vec.tolist() == [0.1, 0.1, 0.2, 0.2, 0.3, 0.3, 0.3]


@given(st.integers(min_value=1, max_value=40), st.integers(min_value=1, max_value=40))
@settings(max_examples=60, deadline=None)
def test_angle_vector_length(L, M):
    if L < M:
        return
    layout = df.chunk_boundaries(L, M)
    vec = df.build_angle_vector(layout, np.linspace(0, 1.0, M))
    assert vec.shape == (L,)


# -- clamp --------------------------------------------------------------------

def test_clamp_examples():
    assert df.clamp_latent(np.array([[0.0]]))[0, 0] == 0.0
    assert df.clamp_latent(np.array([[4.5]]))[0, 0] == 1.0
    assert abs(df.clamp_latent(np.array([[-1.5]]))[0, 0] + 0.5) < 1e-15


def test_clamp_rejects_nonfinite():
    with pytest.raises(DataError):
        df.clamp_latent(np.array([[np.nan]]))
    with pytest.raises(DataError):
        df.clamp_latent(np.array([[np.inf]]))
