import math

import numpy as np
import pytest

from dpd import sampler as smp
from dpd.diffusion import chunk_boundaries
from dpd.errors import DataError, ShapeError
from dpd.network import DpdConfig, DpdModel
from dpd.schedule import HALF_PI, make_schedule, uniform_schedule


def make_config(T=8, kind="linear", cfg_scale=1.0, seed=0, M=4):
    return smp.SamplerConfig(schedule=make_schedule(kind, T), cfg_scale=cfg_scale,
                             seed=seed, chunk_count=M)


# -- ddim step -----------------------------------------------------------------

def test_ddim_step_zero_velocity_shrinks():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5, 3))
    out = smp.ddim_step(z, np.zeros_like(z), 0.7)
    assert np.array_equal(out, math.cos(0.7) * z)


def test_ddim_step_one_step_recovery():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((4, 2))
    eps = rng.standard_normal((4, 2))
    for delta in (0.3, 1.0, HALF_PI):
        z_delta = math.cos(delta) * z + math.sin(delta) * eps
        v = math.cos(delta) * eps - math.sin(delta) * z
        out = smp.ddim_step(z_delta, v, delta)
        assert np.max(np.abs(out - z)) < 1e-12


def test_ddim_step_matches_unsimplified_form():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 30))
        sched = make_schedule(str(rng.choice(["uniform", "linear"])), T)
        t = int(rng.integers(0, T))
        delta, omega = sched.deltas[t], sched.omegas[t]
        z = rng.standard_normal((3, 2))
        v = rng.standard_normal((3, 2))
        simple = smp.ddim_step(z, v, omega)
        reference = smp.ddim_step_reference(z, v, delta, omega)
        worst = max(worst, float(np.max(np.abs(simple - reference))))
    assert worst < 1e-12


def test_ddim_step_errors():
    with pytest.raises(ShapeError):
        smp.ddim_step(np.zeros((2, 2)), np.zeros((3, 2)), 0.5)
    with pytest.raises(DataError):
        smp.ddim_step(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)
    with pytest.raises(DataError):
        smp.ddim_step(np.zeros((2, 2)), np.zeros((2, 2)), -0.5)


# -- classifier-free guidance -----------------------------------------------------

def test_cfg_velocity_examples():
    rng = np.random.default_rng(3)
    vc = rng.standard_normal((3, 2))
    vu = rng.standard_normal((3, 2))
    assert np.array_equal(smp.cfg_velocity(vc, vu, 1.0), vu + (vc - vu))
    assert np.array_equal(smp.cfg_velocity(vc, vu, 0.0), vu)
    out = smp.cfg_velocity(vc, np.zeros_like(vc), 2.5)
    assert np.max(np.abs(out - 2.5 * vc)) < 1e-15


def test_cfg_scale_one_trajectory_bit_identical():
    config = DpdConfig(latent_dim=2, hidden_dim=8, block_count=2, segment_size=4,
                       vocab=5, heads=2, seed=11)
    model = DpdModel.init(config)
    tokens = np.array([1, 3])
    a = smp.sample(tokens, model, make_config(T=3, cfg_scale=1.0, seed=5), frames=6)
    b = smp.sample(tokens, model, make_config(T=3, cfg_scale=1.0, seed=5), frames=6)
    assert np.array_equal(a, b)


def test_cfg_changes_output():
    config = DpdConfig(latent_dim=2, hidden_dim=8, block_count=2, segment_size=4,
                       vocab=5, heads=2, seed=11)
    model = DpdModel.init(config)
    tokens = np.array([1, 3])
    plain = smp.sample(tokens, model, make_config(T=3, cfg_scale=1.0, seed=5), frames=6)
    guided = smp.sample(tokens, model, make_config(T=3, cfg_scale=2.5, seed=5), frames=6)
    assert np.max(np.abs(plain - guided)) > 1e-10


# -- Dirac oracle -------------------------------------------------------------------

@pytest.fixture
def z_star():
    return np.clip(np.random.default_rng(7).standard_normal((12, 3)) * 0.4, -0.95, 0.95)


@pytest.mark.parametrize("kind", ["uniform", "linear"])
@pytest.mark.parametrize("T", [1, 5, 10, 20])
def test_dirac_oracle_sampling_recovers_point_mass(z_star, T, kind):
    oracle = smp.DiracOracleModel(z_star)
    out = smp.sample(np.array([1]), oracle, make_config(T=T, kind=kind, seed=3),
                     frames=12)
    assert np.max(np.abs(out - z_star)) < 1e-6


def test_sample_determinism(z_star):
    oracle = smp.DiracOracleModel(z_star)
    a = smp.sample(np.array([1]), oracle, make_config(T=5, seed=9), frames=12)
    b = smp.sample(np.array([1]), oracle, make_config(T=5, seed=9), frames=12)
    assert np.array_equal(a, b)
    c = smp.sample(np.array([1]), oracle, make_config(T=5, seed=10), frames=12)
    assert not np.array_equal(a, c)


def test_single_step_full_angle_recovery(z_star):
    oracle = smp.DiracOracleModel(z_star)
    out = smp.sample(np.array([1]), oracle, make_config(T=1, seed=2), frames=12)
    assert np.max(np.abs(out - z_star)) < 1e-12


# -- continuation ---------------------------------------------------------------------

def test_continuation_angle_vector_construction():
    vec = smp.continuation_angle_vector(10, 4, 0.8)
    # ceil(10/4) = 3 trailing entries carry the angle
    assert vec.tolist() == [0.0] * 7 + [0.8] * 3
    vec2 = smp.continuation_angle_vector(8, 4, 0.5)
    assert vec2.tolist() == [0.0] * 6 + [0.5] * 2


def test_continuation_preserves_context_bit_identical(z_star):
    oracle = smp.DiracOracleModel(z_star)
    layout = chunk_boundaries(12, 4)
    ctx = z_star[3:12].copy()  # window slides: context = last L - ceil(L/M) rows
    state = smp.ContinuationState(ctx, layout, np.array([1]))
    out = smp.continue_latent(state, np.array([2]), oracle, make_config(T=6, seed=4))
    assert out.shape == (12, 3)
    assert np.array_equal(out[:9], ctx)


def test_continuation_oracle_recovers_new_chunk(z_star):
    oracle = smp.DiracOracleModel(z_star)
    layout = chunk_boundaries(12, 4)
    state = smp.ContinuationState(z_star[:9].copy(), layout, np.array([1]))
    for kind in ("uniform", "linear"):
        for T in (1, 5, 10, 20):
            out = smp.continue_latent(state, np.array([2]), oracle,
                                      make_config(T=T, kind=kind, seed=8))
            assert np.max(np.abs(out[9:] - z_star[9:])) < 1e-6


def test_continuation_state_validation():
    layout = chunk_boundaries(12, 4)
    with pytest.raises(ShapeError):
        smp.ContinuationState(np.zeros((5, 3)), layout)  # needs 9 rows


# -- long-form generation ----------------------------------------------------------

def test_generate_long_no_continuation(z_star):
    oracle = smp.DiracOracleModel(z_star)
    out = smp.generate_long(12, np.arange(1, 5), oracle, make_config(T=4, seed=1),
                            frames=12, tokens_per_window=4)
    base = smp.sample(np.arange(1, 5), oracle, make_config(T=4, seed=1), frames=12)
    assert np.array_equal(out, base)


def test_generate_long_frame_accounting():
    z_star = np.random.default_rng(17).uniform(-0.9, 0.9, (64, 2))
    oracle = smp.DiracOracleModel(z_star)
    calls = {"n": 0}
    orig = oracle.velocity

    def counting(z, angle_vector, tokens=None, unconditional=False):
        calls["n"] += 1
        return orig(z, angle_vector, tokens, unconditional)

    oracle.velocity = counting
    T = 3
    out = smp.generate_long(128, np.arange(1, 100), oracle,
                            make_config(T=T, seed=2, M=4), frames=64,
                            tokens_per_window=16)
    assert out.shape == (128, 2)
    # 1 base + (128-64)/16 = 4 continuations, T evaluations each, no CFG
    assert calls["n"] == T * 5


def test_generate_long_token_exhaustion():
    z_star = np.random.default_rng(18).uniform(-0.9, 0.9, (8, 2))
    oracle = smp.DiracOracleModel(z_star)
    with pytest.raises(DataError):
        smp.generate_long(32, np.arange(1, 6), oracle, make_config(T=2, M=4),
                          frames=8, tokens_per_window=4)


def test_generate_long_window_recovery():
    # oracle holds the window target: every emitted window matches z_star
    z_star = np.random.default_rng(19).uniform(-0.9, 0.9, (12, 2))
    oracle = smp.DiracOracleModel(z_star)
    out = smp.generate_long(18, np.arange(1, 30), oracle,
                            make_config(T=6, seed=3, M=4), frames=12,
                            tokens_per_window=4)
    assert out.shape == (18, 2)
    assert np.max(np.abs(out[:12] - z_star)) < 1e-6


# -- inpainting ----------------------------------------------------------------------

def test_inpaint_all_false_mask_is_noop(z_star):
    oracle = smp.DiracOracleModel(z_star)
    out = smp.inpaint(z_star, np.zeros(12, dtype=bool), np.array([1]), oracle,
                      make_config(T=5, seed=6))
    assert np.array_equal(out, z_star)


def test_inpaint_all_true_equals_sample_same_seed(z_star):
    oracle = smp.DiracOracleModel(z_star)
    cfg = make_config(T=5, seed=21)
    painted = smp.inpaint(np.zeros_like(z_star), np.ones(12, dtype=bool),
                          np.array([1]), oracle, cfg)
    sampled = smp.sample(np.array([1]), oracle, cfg, frames=12)
    assert np.array_equal(painted, sampled)


def test_inpaint_middle_third_oracle_recovery(z_star):
    oracle = smp.DiracOracleModel(z_star)
    mask = np.zeros(12, dtype=bool)
    mask[4:8] = True
    corrupted = z_star.copy()
    corrupted[4:8] = 7.0  # destroyed region
    out = smp.inpaint(corrupted, mask, np.array([1]), oracle,
                      make_config(T=10, seed=5))
    assert np.array_equal(out[~mask], corrupted[~mask])
    assert np.max(np.abs(out[mask] - z_star[mask])) < 1e-6


def test_inpaint_mask_length_error(z_star):
    oracle = smp.DiracOracleModel(z_star)
    with pytest.raises(ShapeError):
        smp.inpaint(z_star, np.ones(5, dtype=bool), np.array([1]), oracle,
                    make_config(T=3))


# -- schedule consumption -----------------------------------------------------------

def test_sample_network_eval_count_per_branch():
    z_star = np.random.default_rng(23).uniform(-0.9, 0.9, (8, 2))
    oracle = smp.DiracOracleModel(z_star)
    seen = []
    orig = oracle.velocity

    def recording(z, angle_vector, tokens=None, unconditional=False):
        seen.append((float(angle_vector[0]), unconditional))
        return orig(z, angle_vector, tokens, unconditional)

    oracle.velocity = recording
    T = 6
    sched = uniform_schedule(T)
    smp.sample(np.array([1]), oracle, smp.SamplerConfig(sched, cfg_scale=1.0, seed=0),
               frames=8)
    assert len(seen) == T
    visited = [a for a, _ in seen]
    assert np.allclose(visited, sched.deltas[::-1], atol=1e-15, rtol=0)

    seen.clear()
    smp.sample(np.array([1]), oracle, smp.SamplerConfig(sched, cfg_scale=2.5, seed=0),
               frames=8)
    assert len(seen) == 2 * T
    assert sum(1 for _, u in seen if u) == T
