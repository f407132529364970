"""Self-contained verification suites: identities, gradients, oracle.

Each check is seeded, reports its measured error against its tolerance, and
the runner exits nonzero if anything fails. `verify all` is the clean-build
gate; the pytest acceptance module drives the same checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffusion as df
from . import network as net
from . import primitives as pr
from . import sampler as smp
from .conditioning import encode_angles, encode_tokens, pooled_tokens
from .gradcheck import FD_STEP, REL_TOL, max_rel_error, probe_coords
from .schedule import HALF_PI, make_schedule

TOY_NET = dict(latent_dim=4, hidden_dim=32, block_count=4, segment_size=8,
               vocab=16, heads=8, seed=1234)


@dataclass
class Check:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name}: max_err={self.error:.3e} "
                f"tol={self.tolerance:.0e}")


# -- identities ------------------------------------------------------------------


def check_schedule_exactness(t_max: int = 1000) -> list[Check]:
    sum_err = 0.0
    tele_err = 0.0
    linear_err = 0.0
    increasing = True
    for T in range(1, t_max + 1):
        for kind in ("uniform", "linear"):
            s = make_schedule(kind, T)
            sum_err = max(sum_err, abs(math.fsum(s.omegas.tolist()) - HALF_PI))
            prev = np.concatenate([[0.0], s.deltas[:-1]])
            tele_err = max(tele_err, float(np.max(np.abs(s.deltas - s.omegas - prev))))
            if kind == "linear" and T > 1:
                diffs = np.diff(s.omegas)
                if not np.all(diffs > 0):
                    increasing = False
                expect = 2 * math.pi / (3 * T * (T + 1))
                linear_err = max(linear_err, float(np.max(np.abs(diffs - expect))))
    return [
        Check(f"schedule sum to pi/2, T=1..{t_max}", sum_err, 1e-12),
        Check(f"schedule telescoping, T=1..{t_max}", tele_err, 1e-12),
        Check("linear schedule constant step difference", linear_err, 1e-12),
        Check("linear schedule strictly increasing", 0.0 if increasing else 1.0, 0.5),
    ]


def check_pinned_constants() -> list[Check]:
    bounds_ok = df.chunk_boundaries(2500, 4).boundaries.tolist() == \
        [0, 625, 1250, 1875, 2500]
    s_ok = net.segment_count(2500, 64) == 80
    k_ms = [net.merged_width(64, i, 8) for i in range(1, 9)]
    k_ok = k_ms == [64, 32, 16, 8, 8, 16, 32, 64]
    return [
        Check("chunk boundaries (2500, 4)", 0.0 if bounds_ok else 1.0, 0.5),
        Check("segment count L=2500 K=64 -> 80", 0.0 if s_ok else 1.0, 0.5),
        Check("sandglass widths K=64 N=8", 0.0 if k_ok else 1.0, 0.5),
    ]


def check_trig_identities(instances: int = 1000) -> list[Check]:
    rng = np.random.default_rng(99)
    round_err = 0.0
    ddim_err = 0.0
    for _ in range(instances):
        delta = float(rng.uniform(0, HALF_PI))
        z = rng.standard_normal((4, 3))
        eps = rng.standard_normal((4, 3))
        z_delta = df.forward_diffuse(z, eps, delta)
        v = math.cos(delta) * eps - math.sin(delta) * z
        round_err = max(round_err,
                        float(np.max(np.abs(df.z_from_v(z_delta, v, delta) - z))),
                        float(np.max(np.abs(df.eps_from_v(z_delta, v, delta) - eps))))
        T = int(rng.integers(1, 30))
        sched = make_schedule(("uniform", "linear")[int(rng.integers(2))], T)
        t = int(rng.integers(0, T))
        simple = smp.ddim_step(z_delta, v, sched.omegas[t])
        reference = smp.ddim_step_reference(z_delta, v, sched.deltas[t],
                                            sched.omegas[t])
        ddim_err = max(ddim_err, float(np.max(np.abs(simple - reference))))
    return [
        Check(f"z/eps recovery round trips ({instances} instances)", round_err, 1e-12),
        Check(f"ddim simplified vs unsimplified ({instances} instances)",
              ddim_err, 1e-12),
    ]


def check_segmentation_inverse() -> list[Check]:
    rng = np.random.default_rng(7)
    worst = 0.0
    for L in (1, 17, 64, 100, 2500):
        for K in (4, 8, 16, 64):
            h = rng.standard_normal((L, 3))
            rec = net.overlap_add(net.segment(h, K)).data
            worst = max(worst, float(np.max(np.abs(rec - h))))
    return [Check("overlap_add(segment(H)) = H over (L,K) grid", worst, 1e-12)]


def identities_suite() -> list[Check]:
    checks = []
    checks += check_schedule_exactness()
    checks += check_pinned_constants()
    checks += check_trig_identities()
    checks += check_segmentation_inverse()
    return checks


# -- gradients -------------------------------------------------------------------


def _fd_check_params(store, build_loss, rng, n_probe=3) -> float:
    store.zero_grad()
    build_loss().backward()
    worst = 0.0
    for name, t in store.items():
        coords = probe_coords(t.data.shape, rng, n_probe)
        saved = t.data.copy()

        def f(x, _t=t):
            _t.data = x
            val = float(build_loss().data)
            _t.data = saved
            return val

        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, max_rel_error(f, saved, grad, coords=coords, h=FD_STEP))
    return worst


def gradients_suite() -> list[Check]:
    checks = []
    rng = np.random.default_rng(4242)

    def probe_loss(out, probe):
        return ad.tsum(ad.mul(out, probe))

    worst = 0.0
    for seed in range(3):
        crng = np.random.default_rng(1000 + seed)
        store = pr.ParamStore()
        block = pr.init_mlp(store, "mlp", 3, 4, crng)
        x = crng.standard_normal((2, 3))
        probe = crng.standard_normal((2, 4))
        worst = max(worst, _fd_check_params(
            store, lambda: probe_loss(pr.mlp(ad.Tensor(x), block), probe), rng))
    checks.append(Check("mlp parameter gradients (3 configs)", worst, REL_TOL))

    worst = 0.0
    for seed in range(3):
        crng = np.random.default_rng(2000 + seed)
        store = pr.ParamStore()
        params = pr.init_film(store, "film", 4, crng)
        x = crng.standard_normal((3, 4))
        m = crng.standard_normal(4)
        probe = crng.standard_normal((3, 4))
        worst = max(worst, _fd_check_params(
            store, lambda: probe_loss(pr.film(ad.Tensor(x), ad.Tensor(m), params),
                                      probe), rng))
    checks.append(Check("film parameter gradients (3 configs)", worst, REL_TOL))

    worst = 0.0
    for seed in range(3):
        crng = np.random.default_rng(3000 + seed)
        store = pr.ParamStore()
        params = pr.init_sru(store, "sru", 4, crng)
        x = crng.standard_normal((3, 4))
        probe = crng.standard_normal((3, 4))
        worst = max(worst, _fd_check_params(
            store, lambda: probe_loss(pr.sru_bidirectional(ad.Tensor(x), params),
                                      probe), rng))
    checks.append(Check("sru parameter gradients (3 configs)", worst, REL_TOL))

    worst = 0.0
    for seed in range(3):
        crng = np.random.default_rng(4000 + seed)
        store = pr.ParamStore()
        params = pr.init_attention(store, "attn", 4, 2, crng)
        x = crng.standard_normal((3, 4))
        c = crng.standard_normal((5, 4))
        probe = crng.standard_normal((3, 4))
        worst = max(worst, _fd_check_params(
            store, lambda: probe_loss(
                pr.cross_attention(ad.Tensor(x), ad.Tensor(c), params), probe), rng))
        worst = max(worst, _fd_check_params(
            store, lambda: probe_loss(
                pr.rotary_self_attention(ad.Tensor(x), params), probe), rng))
    checks.append(Check("attention parameter gradients (3 configs)", worst, REL_TOL))

    worst = 0.0
    for seed in range(3):
        crng = np.random.default_rng(5000 + seed)
        store = pr.ParamStore()
        from .conditioning import init_angle_encoder, init_token_encoder
        ang = init_angle_encoder(store, "angle", 4, crng)
        tok = init_token_encoder(store, "token", 5, 4, crng)
        vec = crng.uniform(0, HALF_PI, 3)
        ids = crng.integers(1, 6, size=4)
        pa = crng.standard_normal((3, 4))
        pt = crng.standard_normal(4)
        worst = max(worst, _fd_check_params(
            store, lambda: ad.add(
                probe_loss(encode_angles(vec, ang), pa),
                probe_loss(pooled_tokens(encode_tokens(ids, tok)), pt)), rng))
    checks.append(Check("encoder parameter gradients (3 configs)", worst, REL_TOL))

    # full network at the pinned toy configuration, parameters and inputs
    config = net.DpdConfig(**TOY_NET)
    model = net.DpdModel.init(config)
    crng = np.random.default_rng(777)
    z = crng.standard_normal((64, 4))
    vec = crng.uniform(0, HALF_PI, 64)
    tokens = crng.integers(1, 17, size=8)
    v_tgt = crng.standard_normal((64, 4))

    def full_loss():
        diff = ad.sub(net.velocity_forward(z, vec, tokens, model), v_tgt)
        return ad.tsum(ad.mul(diff, diff))

    worst = _fd_check_params(model.store, full_loss, rng, n_probe=2)
    checks.append(Check("full network parameter gradients (L=64 D=4 "
                        "D_hid=32 N=4 K=8)", worst, REL_TOL))

    leaf = ad.Tensor(z, requires_grad=True)
    model.store.zero_grad()
    diff = ad.sub(net.velocity_forward(leaf, vec, tokens, model), v_tgt)
    ad.tsum(ad.mul(diff, diff)).backward()

    def f_input(x):
        d = ad.sub(net.velocity_forward(x, vec, tokens, model), v_tgt)
        return float(ad.tsum(ad.mul(d, d)).data)

    coords = probe_coords(z.shape, rng, 6)
    err = max_rel_error(f_input, z, leaf.grad, coords=coords, h=FD_STEP)
    checks.append(Check("full network input gradients", err, REL_TOL))
    return checks


# -- oracle ----------------------------------------------------------------------


def oracle_suite() -> list[Check]:
    rng = np.random.default_rng(31337)
    z_star = rng.uniform(-0.95, 0.95, (24, 3))
    oracle = smp.DiracOracleModel(z_star)
    checks = []

    worst = 0.0
    for kind in ("uniform", "linear"):
        for T in (1, 5, 10, 20):
            config = smp.SamplerConfig(make_schedule(kind, T), seed=5)
            out = smp.sample(np.array([1]), oracle, config, frames=24)
            worst = max(worst, float(np.max(np.abs(out - z_star))))
    checks.append(Check("dirac-oracle sampling, T in {1,5,10,20} x both "
                        "schedules", worst, 1e-6))

    layout = df.chunk_boundaries(24, 4)
    state = smp.ContinuationState(z_star[:18].copy(), layout, np.array([1]))
    worst = 0.0
    for kind in ("uniform", "linear"):
        for T in (1, 5, 10, 20):
            config = smp.SamplerConfig(make_schedule(kind, T), seed=6)
            out = smp.continue_latent(state, np.array([2]), oracle, config)
            if not np.array_equal(out[:18], z_star[:18]):
                worst = max(worst, 1.0)
            worst = max(worst, float(np.max(np.abs(out[18:] - z_star[18:]))))
    checks.append(Check("dirac-oracle continuation, context frozen", worst, 1e-6))

    mask = np.zeros(24, dtype=bool)
    mask[8:16] = True
    corrupted = z_star.copy()
    corrupted[mask] = 5.0
    worst = 0.0
    for kind in ("uniform", "linear"):
        for T in (1, 5, 10, 20):
            config = smp.SamplerConfig(make_schedule(kind, T), seed=7)
            out = smp.inpaint(corrupted, mask, np.array([1]), oracle, config)
            if not np.array_equal(out[~mask], corrupted[~mask]):
                worst = max(worst, 1.0)
            worst = max(worst, float(np.max(np.abs(out[mask] - z_star[mask]))))
    checks.append(Check("dirac-oracle inpainting, unmasked frozen", worst, 1e-6))
    return checks


SUITES = {
    "identities": identities_suite,
    "gradients": gradients_suite,
    "oracle": oracle_suite,
}


def run_suites(names, printer=print) -> int:
    """Run the named suites; returns a process exit code (0 = all pass)."""
    if isinstance(names, str):
        names = [names]
    expanded = []
    for name in names:
        if name == "all":
            expanded.extend(SUITES)
        elif name in SUITES:
            expanded.append(name)
        else:
            raise ValueError(f"unknown verification suite {name!r}")
    failures = 0
    for name in expanded:
        printer(f"== suite: {name} ==")
        for check in SUITES[name]():
            printer(check.line())
            failures += 0 if check.passed else 1
    printer(f"{'OK' if failures == 0 else 'FAILED'}: {failures} failing check(s)")
    return 0 if failures == 0 else 1
