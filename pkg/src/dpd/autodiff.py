"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The engine is a tape of `Tensor` nodes; each operation records a backward
closure that accumulates gradients into its parents. Everything runs in
64-bit precision and is fully deterministic: identical inputs produce
bit-identical outputs and gradients.

Only the operations needed by the velocity network are provided. Windowed
gather/scatter for half-overlapping segments is implemented with a
parity-split reshape (even- and odd-indexed windows each tile the padded
axis contiguously when stride = width/2), so no unbuffered ufunc.at calls
appear on the hot path.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels
from .errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus the tape machinery to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph walk ----------------------------------------------------

    def backward(self, grad=None):
        """Accumulate gradients of `self` into every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeError(f"gradient shape {grad.shape} != value shape {self.data.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = _accum(self.grad, grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # interior nodes are one-shot; free their gradient buffers
                node.grad = None

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _accum(current, update, own=False):
    """Accumulate `update` into a gradient buffer.

    `own=True` promises `update` is freshly allocated (or a view of a fresh
    buffer with no other owner), so it can be adopted without copying.
    """
    if current is None:
        if own:
            return update
        return update.copy() if isinstance(update, np.ndarray) else np.asarray(update)
    current += update
    return current


def _tracked(*tensors):
    return _grad_enabled and any(t.requires_grad or t._parents or t._backward for t in tensors)


def _make(data, parents, backward, track):
    if not track:
        return Tensor(data)
    return Tensor(data, parents=parents, backward=backward)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ----------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    track = _tracked(a, b)
    out_data = a.data + b.data

    def backward(g):
        ga = _unbroadcast(g, a.data.shape)
        gb = _unbroadcast(g, b.data.shape)
        a.grad = _accum(a.grad, ga, own=ga is not g)
        b.grad = _accum(b.grad, gb, own=gb is not g)

    return _make(out_data, (a, b), backward, track)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    track = _tracked(a, b)
    out_data = a.data - b.data

    def backward(g):
        ga = _unbroadcast(g, a.data.shape)
        a.grad = _accum(a.grad, ga, own=ga is not g)
        b.grad = _accum(b.grad, _unbroadcast(-g, b.data.shape), own=True)

    return _make(out_data, (a, b), backward, track)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    track = _tracked(a, b)
    out_data = a.data * b.data

    def backward(g):
        a.grad = _accum(a.grad, _unbroadcast(g * b.data, a.data.shape), own=True)
        b.grad = _accum(b.grad, _unbroadcast(g * a.data, b.data.shape), own=True)

    return _make(out_data, (a, b), backward, track)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    track = _tracked(a, b)
    out_data = a.data / b.data

    def backward(g):
        a.grad = _accum(a.grad, _unbroadcast(g / b.data, a.data.shape), own=True)
        b.grad = _accum(b.grad, _unbroadcast(-g * out_data / b.data, b.data.shape),
                        own=True)

    return _make(out_data, (a, b), backward, track)


def _contig(x):
    # stacked matmul falls off the BLAS fast path on non-contiguous views
    if x.ndim > 2 and not x.flags.c_contiguous:
        return np.ascontiguousarray(x)
    return x


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    track = _tracked(a, b)
    if a.data.ndim > 2 and b.data.ndim == 2:
        # one flat GEMM instead of numpy's per-slice iteration
        lead = a.data.shape[:-1]
        a2 = np.ascontiguousarray(a.data).reshape(-1, a.data.shape[-1])
        out_data = (a2 @ b.data).reshape(lead + (b.data.shape[1],))

        def backward(g):
            g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            a.grad = _accum(a.grad, (g2 @ b.data.T).reshape(a.data.shape), own=True)
            b.grad = _accum(b.grad, a2.T @ g2, own=True)

        return _make(out_data, (a, b), backward, track)
    out_data = _contig(a.data) @ _contig(b.data)

    def backward(g):
        if b.data.ndim == 1:
            ga = np.outer(g, b.data) if a.data.ndim > 1 else g * b.data
            gb = (a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1)
                  if a.data.ndim > 1 else a.data * g)
            a.grad = _accum(a.grad, _unbroadcast(np.asarray(ga), a.data.shape), own=True)
            b.grad = _accum(b.grad, _unbroadcast(np.asarray(gb), b.data.shape), own=True)
            return
        if a.data.ndim == 1:
            a.grad = _accum(a.grad, _unbroadcast(g @ np.swapaxes(b.data, -1, -2),
                                                 a.data.shape), own=True)
            b.grad = _accum(b.grad, _unbroadcast(np.multiply.outer(a.data, g),
                                                 b.data.shape), own=True)
            return
        # ga = g b^T and gb = a^T g; (X^T Y) = (Y^T X)^T picks which operand
        # pays the transpose copy — always the smaller one
        if b.data.size <= g.size + a.data.size:
            ga = _contig(g) @ _contig(np.swapaxes(b.data, -1, -2))
        else:
            ga = np.swapaxes(_contig(b.data) @ _contig(np.swapaxes(g, -1, -2)),
                             -1, -2)
        if a.data.size <= g.size + b.data.size:
            gb = _contig(np.swapaxes(a.data, -1, -2)) @ _contig(g)
        else:
            gb = np.swapaxes(_contig(np.swapaxes(g, -1, -2)) @ _contig(a.data),
                             -1, -2)
        a.grad = _accum(a.grad, _unbroadcast(ga, a.data.shape), own=True)
        b.grad = _accum(b.grad, _unbroadcast(gb, b.data.shape), own=True)

    return _make(out_data, (a, b), backward, track)


# -- shape manipulation ---------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    track = _tracked(a)
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        # a view of the child's (now exclusively owned) gradient buffer
        a.grad = _accum(a.grad, g.reshape(in_shape), own=True)

    return _make(out_data, (a,), backward, track)


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    track = _tracked(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        a.grad = _accum(a.grad, np.swapaxes(g, ax1, ax2), own=True)

    return _make(out_data, (a,), backward, track)


def broadcast_to(a, shape):
    a = as_tensor(a)
    track = _tracked(a)
    out_data = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        gb = _unbroadcast(g, a.data.shape)
        a.grad = _accum(a.grad, gb, own=gb is not g)

    return _make(out_data, (a,), backward, track)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    track = _tracked(*tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        # split pieces are disjoint views of the child's gradient buffer
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.grad = _accum(t.grad, piece, own=True)

    return _make(out_data, tuple(tensors), backward, track)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis
               for i in items)


def take(a, idx):
    """General indexing; backward scatter-adds (handles repeated indices)."""
    a = as_tensor(a)
    track = _tracked(a)
    out_data = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        buf = np.zeros_like(a.data)
        if basic:
            buf[idx] += g  # basic indexing never repeats elements
        else:
            np.add.at(buf, idx, g)
        a.grad = _accum(a.grad, buf, own=True)

    return _make(out_data.copy() if basic else out_data, (a,), backward, track)


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    track = _tracked(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.grad = _accum(a.grad, np.broadcast_to(g, a.data.shape).copy(), own=True)

    return _make(out_data, (a,), backward, track)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- elementwise nonlinearities -------------------------------------------


def sigmoid(a):
    a = as_tensor(a)
    track = _tracked(a)
    out_data = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def backward(g):
        a.grad = _accum(a.grad, g * out_data * (1.0 - out_data), own=True)

    return _make(out_data, (a,), backward, track)


def gelu(a):
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF via erf."""
    a = as_tensor(a)
    track = _tracked(a)
    x = np.ascontiguousarray(a.data)
    flat, cdf = kernels.gelu_fwd(x.reshape(-1))
    out_data = flat.reshape(x.shape)

    def backward(g):
        gx = kernels.gelu_bwd(x.reshape(-1), cdf, np.ascontiguousarray(g).reshape(-1))
        a.grad = _accum(a.grad, gx.reshape(x.shape), own=True)

    return _make(out_data, (a,), backward, track)


def tsqrt(a):
    a = as_tensor(a)
    track = _tracked(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a.grad = _accum(a.grad, g * (0.5 / out_data), own=True)

    return _make(out_data, (a,), backward, track)


def tsin(a):
    a = as_tensor(a)
    track = _tracked(a)
    out_data = np.sin(a.data)

    def backward(g):
        a.grad = _accum(a.grad, g * np.cos(a.data), own=True)

    return _make(out_data, (a,), backward, track)


def tcos(a):
    a = as_tensor(a)
    track = _tracked(a)
    out_data = np.cos(a.data)

    def backward(g):
        a.grad = _accum(a.grad, -g * np.sin(a.data), own=True)

    return _make(out_data, (a,), backward, track)


def softmax_last(a):
    """Softmax along the last axis, numerically shifted."""
    a = as_tensor(a)
    track = _tracked(a)
    shape = a.data.shape
    x2 = np.ascontiguousarray(a.data).reshape(-1, shape[-1])
    out2 = kernels.softmax_rows(x2)
    out_data = out2.reshape(shape)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, shape[-1])
        a.grad = _accum(a.grad, kernels.softmax_rows_grad(out2, g2).reshape(shape),
                        own=True)

    return _make(out_data, (a,), backward, track)


def rmsnorm_fused(x, gain, eps):
    """x / sqrt(mean(x^2, -1) + eps) * gain, one node with analytic backward."""
    x, gain = as_tensor(x), as_tensor(gain)
    track = _tracked(x, gain)
    shape = x.data.shape
    n = shape[-1]
    x2 = np.ascontiguousarray(x.data).reshape(-1, n)
    out2, inv = kernels.rmsnorm_rows(x2, gain.data, eps)
    out_data = out2.reshape(shape)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        gx, ggain = kernels.rmsnorm_rows_grad(x2, gain.data, inv, g2)
        x.grad = _accum(x.grad, gx.reshape(shape), own=True)
        gain.grad = _accum(gain.grad, ggain, own=True)

    return _make(out_data, (x, gain), backward, track)


def rotary_fused(x, cos, sin):
    """Rotate interleaved pairs of the last axis by position-dependent angles.

    x: (..., T, d); cos/sin: (T, d/2) plain arrays. Each even/odd pair is a
    complex number, so the rotation is one complex multiply; the backward
    rotates the gradient by the negated angles (conjugate rotor).
    """
    x = as_tensor(x)
    track = _tracked(x)
    rotor = cos + 1j * sin  # (T, d/2)
    xc = np.ascontiguousarray(x.data).view(np.complex128)
    out_data = (xc * rotor).view(np.float64)

    def backward(g):
        gc = np.ascontiguousarray(g).view(np.complex128)
        gx = (gc * np.conj(rotor)).view(np.float64)
        x.grad = _accum(x.grad, gx, own=True)

    return _make(out_data, (x,), backward, track)


def affine(x, w, b):
    """x @ w + b in one node; x: (..., k), w: (k, n), b: (n,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    track = _tracked(x, w, b)
    lead = x.data.shape[:-1]
    x2 = np.ascontiguousarray(x.data).reshape(-1, x.data.shape[-1])
    out2 = x2 @ w.data
    out2 += b.data
    out_data = out2.reshape(lead + (w.data.shape[1],))

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
        x.grad = _accum(x.grad, (g2 @ w.data.T).reshape(x.data.shape), own=True)
        w.grad = _accum(w.grad, x2.T @ g2, own=True)
        b.grad = _accum(b.grad, g2.sum(axis=0), own=True)

    return _make(out_data, (x, w, b), backward, track)


# -- half-overlapping windows ---------------------------------------------


def _parity_layout(count, width):
    n_even = (count + 1) // 2
    n_odd = count // 2
    return n_even, n_odd


def _window_geometry(length, count, width, pad_front):
    if width < 2 or width % 2 != 0:
        raise ShapeError(f"window width must be even and >= 2, got {width}")
    stride = width // 2
    total = (count - 1) * stride + width
    pad_back = total - pad_front - length
    if pad_back < 0:
        raise ShapeError("window layout does not cover the axis: negative back padding")
    return stride, total, pad_back


def half_overlap_windows(a, count, width, pad_front):
    """Gather `count` windows of `width` at stride width/2 from axis -2.

    The axis is zero-padded by `pad_front` in front and minimally behind so
    the windows tile it exactly. Output shape: (..., count, width, C).
    """
    a = as_tensor(a)
    track = _tracked(a)
    length = a.data.shape[-2]
    stride, total, pad_back = _window_geometry(length, count, width, pad_front)
    n_even, n_odd = _parity_layout(count, width)

    lead = a.data.shape[:-2]
    ch = a.data.shape[-1]
    padded = np.empty(lead + (total, ch), dtype=np.float64)
    padded[..., :pad_front, :] = 0.0
    padded[..., pad_front + length:, :] = 0.0
    padded[..., pad_front:pad_front + length, :] = a.data
    out_data = np.empty(lead + (count, width, ch), dtype=np.float64)
    out_data[..., 0::2, :, :] = padded[..., :n_even * width, :].reshape(lead + (n_even, width, ch))
    if n_odd:
        out_data[..., 1::2, :, :] = padded[..., stride:stride + n_odd * width, :].reshape(
            lead + (n_odd, width, ch))

    def backward(g):
        buf = np.zeros(lead + (total, ch), dtype=np.float64)
        buf[..., :n_even * width, :] += g[..., 0::2, :, :].reshape(lead + (n_even * width, ch))
        if n_odd:
            buf[..., stride:stride + n_odd * width, :] += g[..., 1::2, :, :].reshape(
                lead + (n_odd * width, ch))
        a.grad = _accum(a.grad, buf[..., pad_front:pad_front + length, :], own=True)

    return _make(out_data, (a,), backward, track)


def half_overlap_fold(a, length, pad_front):
    """Sum windows (..., count, width, C) back onto an axis of `length`.

    Exact adjoint of half_overlap_windows: overlapping frames are summed,
    padding is trimmed. Coverage normalization is up to the caller.
    """
    a = as_tensor(a)
    track = _tracked(a)
    count, width = a.data.shape[-3], a.data.shape[-2]
    stride, total, pad_back = _window_geometry(length, count, width, pad_front)
    n_even, n_odd = _parity_layout(count, width)

    lead = a.data.shape[:-3]
    ch = a.data.shape[-1]
    buf = np.zeros(lead + (total, ch), dtype=np.float64)
    buf[..., :n_even * width, :] += a.data[..., 0::2, :, :].reshape(lead + (n_even * width, ch))
    if n_odd:
        buf[..., stride:stride + n_odd * width, :] += a.data[..., 1::2, :, :].reshape(
            lead + (n_odd * width, ch))
    out_data = buf[..., pad_front:pad_front + length, :].copy()

    def backward(g):
        gbuf = np.zeros(lead + (total, ch), dtype=np.float64)
        gbuf[..., pad_front:pad_front + length, :] = g
        gwin = np.empty_like(a.data)
        gwin[..., 0::2, :, :] = gbuf[..., :n_even * width, :].reshape(lead + (n_even, width, ch))
        if n_odd:
            gwin[..., 1::2, :, :] = gbuf[..., stride:stride + n_odd * width, :].reshape(
                lead + (n_odd, width, ch))
        a.grad = _accum(a.grad, gwin, own=True)

    return _make(out_data, (a,), backward, track)


def sru_recurrence(u, vf, vr, bf, br, highway):
    """Gated SRU recurrence over axis -2, one node with hand-derived BPTT.

        f_t = logistic(uf_t + vf * c_{t-1} + bf)
        r_t = logistic(ur_t + vr * c_{t-1} + br)
        c_t = f_t * c_{t-1} + (1 - f_t) * uw_t       (c_0 = 0)
        h_t = r_t * c_t + (1 - r_t) * uh_t

    u: (..., K, 3*D) packed pre-projections [uw | uf | ur]; highway: the
    (..., K, D) term uh (the layer input, or its learned projection when the
    widths differ). vf/vr/bf/br: (D,).
    """
    u = as_tensor(u)
    highway = as_tensor(highway)
    vf, vr, bf, br = as_tensor(vf), as_tensor(vr), as_tensor(bf), as_tensor(br)
    track = _tracked(u, highway, vf, vr, bf, br)

    d = vf.data.shape[0]
    steps = u.data.shape[-2]
    lead = u.data.shape[:-2]
    u3 = np.ascontiguousarray(u.data).reshape(-1, steps, 3 * d)
    uh3 = np.ascontiguousarray(highway.data).reshape(-1, steps, d)
    h, fs, rs, cs = kernels.sru_fwd(u3, uh3, vf.data, vr.data, bf.data, br.data)
    out_data = h.reshape(lead + (steps, d))

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(-1, steps, d)
        gu, guh, gvf, gvr, gbf, gbr = kernels.sru_bwd(
            u3, uh3, vf.data, vr.data, fs, rs, cs, g3)
        u.grad = _accum(u.grad, gu.reshape(u.data.shape), own=True)
        highway.grad = _accum(highway.grad, guh.reshape(highway.data.shape), own=True)
        vf.grad = _accum(vf.grad, gvf, own=True)
        vr.grad = _accum(vr.grad, gvr, own=True)
        bf.grad = _accum(bf.grad, gbf, own=True)
        br.grad = _accum(br.grad, gbr, own=True)

    return _make(out_data, (u, highway, vf, vr, bf, br), backward, track)


def fold_coverage(length, count, width, pad_front):
    """Per-frame window coverage counts for the fold geometry (plain array)."""
    stride, total, _ = _window_geometry(length, count, width, pad_front)
    cov = np.zeros(total, dtype=np.float64)
    for s in range(count):
        cov[s * stride:s * stride + width] += 1.0
    return cov[pad_front:pad_front + length]
