"""Central finite-difference gradient verification.

All analytic gradients in this package are checked against the two-sided
difference (f(x+h) - f(x-h)) / 2h at 64-bit precision with h = 1e-5.
Relative error uses a floored denominator so dead (exactly zero) gradients
do not produce spurious failures from finite-difference noise.
"""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-5
REL_TOL = 1e-4
_DENOM_FLOOR = 1e-4


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), _DENOM_FLOOR)


def fd_gradient(f, x: np.ndarray, coords=None, h: float = FD_STEP) -> dict:
    """Numeric d f / d x[c] for each coordinate c (all coords by default)."""
    x = np.asarray(x, dtype=np.float64)
    if coords is None:
        coords = list(np.ndindex(x.shape)) if x.ndim else [()]
    out = {}
    for c in coords:
        xp = x.copy()
        xm = x.copy()
        xp[c] += h
        xm[c] -= h
        out[c] = (f(xp) - f(xm)) / (2.0 * h)
    return out


def probe_coords(shape, rng: np.random.Generator, n: int):
    """Up to `n` distinct coordinates of `shape`, deterministically drawn."""
    size = int(np.prod(shape)) if shape else 1
    n = min(n, size)
    flat = rng.choice(size, size=n, replace=False)
    if not shape:
        return [()]
    return [tuple(np.unravel_index(int(i), shape)) for i in flat]


def max_rel_error(f, x: np.ndarray, analytic: np.ndarray, coords=None, h: float = FD_STEP) -> float:
    """Worst relative error between `analytic` and finite differences of f."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = fd_gradient(f, x, coords=coords, h=h)
    worst = 0.0
    for c, num in numeric.items():
        worst = max(worst, rel_error(float(analytic[c]), num))
    return worst
