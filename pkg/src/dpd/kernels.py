"""Hot numeric kernels with single-pass JIT implementations.

Each kernel has a pure-numpy fallback with identical semantics; the JIT
versions (numba, fastmath disabled so IEEE rounding is preserved) fuse the
memory passes that dominate the float64 training loop. All kernels are
single-threaded and bit-deterministic for fixed inputs.

Shapes are normalized by the callers: 2-D (rows, cols) for the row kernels,
3-D (rows, steps, cols) for the recurrence.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def deco(f):
            return f

        return deco


@njit(cache=True)
def softmax_rows(x):
    """Row softmax of a 2-D array, max-shifted."""
    rows, cols = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            e = math.exp(x[r, c] - m)
            out[r, c] = e
            s += e
        inv = 1.0 / s
        for c in range(cols):
            out[r, c] *= inv
    return out


@njit(cache=True)
def softmax_rows_grad(out, g):
    rows, cols = out.shape
    gx = np.empty_like(out)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += g[r, c] * out[r, c]
        for c in range(cols):
            gx[r, c] = out[r, c] * (g[r, c] - dot)
    return gx


def softmax_rows_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_rows_grad_np(out, g):
    dot = (g * out).sum(axis=-1, keepdims=True)
    return out * (g - dot)


@njit(cache=True)
def rmsnorm_rows(x, gain, eps):
    """Returns (out, inv) with inv the per-row 1/sqrt(mean(x^2) + eps)."""
    rows, cols = x.shape
    out = np.empty_like(x)
    inv = np.empty(rows)
    for r in range(rows):
        ms = 0.0
        for c in range(cols):
            ms += x[r, c] * x[r, c]
        iv = 1.0 / math.sqrt(ms / cols + eps)
        inv[r] = iv
        for c in range(cols):
            out[r, c] = x[r, c] * iv * gain[c]
    return out, inv


@njit(cache=True)
def rmsnorm_rows_grad(x, gain, inv, g):
    rows, cols = x.shape
    gx = np.empty_like(x)
    ggain = np.zeros(cols)
    for r in range(rows):
        iv = inv[r]
        dot = 0.0
        for c in range(cols):
            dot += g[r, c] * gain[c] * x[r, c]
        dot /= cols
        iv3dot = iv * iv * iv * dot
        for c in range(cols):
            gx[r, c] = iv * g[r, c] * gain[c] - x[r, c] * iv3dot
            ggain[c] += g[r, c] * x[r, c] * iv
    return gx, ggain


def rmsnorm_rows_np(x, gain, eps):
    ms = np.einsum("ij,ij->i", x, x) / x.shape[1]
    inv = 1.0 / np.sqrt(ms + eps)
    return x * (inv[:, None] * gain), inv


def rmsnorm_rows_grad_np(x, gain, inv, g):
    cols = x.shape[1]
    gg = g * gain
    dot = np.einsum("ij,ij->i", gg, x)[:, None] / cols
    inv = inv[:, None]
    gx = inv * gg - x * (inv * inv * inv * dot)
    ggain = np.einsum("ij,ij->j", g * x, np.broadcast_to(inv, x.shape))
    return gx, ggain


@njit(cache=True)
def gelu_fwd(x):
    """Returns (out, cdf); exact erf form."""
    n = x.shape[0]
    out = np.empty_like(x)
    cdf = np.empty_like(x)
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    for i in range(n):
        c = 0.5 * (1.0 + math.erf(x[i] * inv_sqrt2))
        cdf[i] = c
        out[i] = x[i] * c
    return out, cdf


@njit(cache=True)
def gelu_bwd(x, cdf, g):
    n = x.shape[0]
    gx = np.empty_like(x)
    inv_sqrt2pi = 1.0 / math.sqrt(2.0 * math.pi)
    for i in range(n):
        pdf = inv_sqrt2pi * math.exp(-0.5 * x[i] * x[i])
        gx[i] = g[i] * (cdf[i] + x[i] * pdf)
    return gx


def gelu_fwd_np(x):
    from scipy.special import erf
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return x * cdf, cdf


def gelu_bwd_np(x, cdf, g):
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return g * (cdf + x * pdf)


@njit(cache=True)
def sru_fwd(u, uh, vf, vr, bf, br):
    """SRU recurrence, u: (rows, steps, 3*d) packed [uw|uf|ur], uh: (rows,
    steps, d). Returns (h, f, r, c) caches, each (rows, steps, d)."""
    rows, steps, _ = u.shape
    d = uh.shape[2]
    h = np.empty((rows, steps, d))
    fs = np.empty((rows, steps, d))
    rs = np.empty((rows, steps, d))
    cs = np.empty((rows, steps, d))
    for i in range(rows):
        for j in range(d):
            c = 0.0
            for t in range(steps):
                f = 1.0 / (1.0 + math.exp(-(u[i, t, d + j] + vf[j] * c + bf[j])))
                r = 1.0 / (1.0 + math.exp(-(u[i, t, 2 * d + j] + vr[j] * c + br[j])))
                c = f * c + (1.0 - f) * u[i, t, j]
                fs[i, t, j] = f
                rs[i, t, j] = r
                cs[i, t, j] = c
                h[i, t, j] = r * c + (1.0 - r) * uh[i, t, j]
    return h, fs, rs, cs


@njit(cache=True)
def sru_bwd(u, uh, vf, vr, fs, rs, cs, g):
    """Backward of sru_fwd; returns (gu, guh, gvf, gvr, gbf, gbr)."""
    rows, steps, _ = u.shape
    d = uh.shape[2]
    gu = np.empty_like(u)
    guh = np.empty_like(uh)
    gvf = np.zeros(d)
    gvr = np.zeros(d)
    gbf = np.zeros(d)
    gbr = np.zeros(d)
    for i in range(rows):
        for j in range(d):
            dc_next = 0.0
            for t in range(steps - 1, -1, -1):
                f = fs[i, t, j]
                r = rs[i, t, j]
                c = cs[i, t, j]
                c_prev = cs[i, t - 1, j] if t > 0 else 0.0
                gt = g[i, t, j]
                dr = gt * (c - uh[i, t, j])
                dc = gt * r + dc_next
                guh[i, t, j] = gt * (1.0 - r)
                dpre_r = dr * r * (1.0 - r)
                gu[i, t, 2 * d + j] = dpre_r
                gvr[j] += dpre_r * c_prev
                gbr[j] += dpre_r
                df = dc * (c_prev - u[i, t, j])
                gu[i, t, j] = dc * (1.0 - f)
                dpre_f = df * f * (1.0 - f)
                gu[i, t, d + j] = dpre_f
                gvf[j] += dpre_f * c_prev
                gbf[j] += dpre_f
                dc_next = dc * f + dpre_r * vr[j] + dpre_f * vf[j]
    return gu, guh, gvf, gvr, gbf, gbr


def sru_fwd_np(u, uh, vf, vr, bf, br):
    rows, steps, _ = u.shape
    d = uh.shape[2]
    h = np.empty((rows, steps, d))
    fs = np.empty((rows, steps, d))
    rs = np.empty((rows, steps, d))
    cs = np.empty((rows, steps, d))
    c = np.zeros((rows, d))
    for t in range(steps):
        f = 0.5 * (np.tanh(0.5 * (u[:, t, d:2 * d] + vf * c + bf)) + 1.0)
        r = 0.5 * (np.tanh(0.5 * (u[:, t, 2 * d:3 * d] + vr * c + br)) + 1.0)
        c = f * c + (1.0 - f) * u[:, t, 0:d]
        fs[:, t] = f
        rs[:, t] = r
        cs[:, t] = c
        h[:, t] = r * c + (1.0 - r) * uh[:, t]
    return h, fs, rs, cs


def sru_bwd_np(u, uh, vf, vr, fs, rs, cs, g):
    rows, steps, _ = u.shape
    d = uh.shape[2]
    gu = np.empty_like(u)
    guh = np.empty_like(uh)
    gvf = np.zeros(d)
    gvr = np.zeros(d)
    gbf = np.zeros(d)
    gbr = np.zeros(d)
    dc_next = np.zeros((rows, d))
    zero = np.zeros((rows, d))
    for t in range(steps - 1, -1, -1):
        f = fs[:, t]
        r = rs[:, t]
        c = cs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else zero
        gt = g[:, t]
        dr = gt * (c - uh[:, t])
        dc = gt * r + dc_next
        guh[:, t] = gt * (1.0 - r)
        dpre_r = dr * r * (1.0 - r)
        gu[:, t, 2 * d:3 * d] = dpre_r
        gvr += (dpre_r * c_prev).sum(axis=0)
        gbr += dpre_r.sum(axis=0)
        df = dc * (c_prev - u[:, t, 0:d])
        gu[:, t, 0:d] = dc * (1.0 - f)
        dpre_f = df * f * (1.0 - f)
        gu[:, t, d:2 * d] = dpre_f
        gvf += (dpre_f * c_prev).sum(axis=0)
        gbf += dpre_f.sum(axis=0)
        dc_next = dc * f + dpre_r * vr + dpre_f * vf
    return gu, guh, gvf, gvr, gbf, gbr


@njit(cache=True)
def fnv1a64(data):
    """64-bit FNV-1a over a uint8 array."""
    h = np.uint64(0xcbf29ce484222325)
    prime = np.uint64(0x100000001b3)
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * prime
    return h


def fnv1a64_np(data):
    h = 0xcbf29ce484222325
    for b in bytes(data):
        h = ((h ^ b) * 0x100000001b3) & 0xFFFFFFFFFFFFFFFF
    return np.uint64(h)


if not HAVE_NUMBA:  # pragma: no cover
    softmax_rows = softmax_rows_np
    softmax_rows_grad = softmax_rows_grad_np
    rmsnorm_rows = rmsnorm_rows_np
    rmsnorm_rows_grad = rmsnorm_rows_grad_np
    gelu_fwd = gelu_fwd_np
    gelu_bwd = gelu_bwd_np
    sru_fwd = sru_fwd_np
    sru_bwd = sru_bwd_np
    fnv1a64 = fnv1a64_np
