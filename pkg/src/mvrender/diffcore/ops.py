"""The closed primitive set of the autodiff core.

Every differentiable computation in this package is composed from the
operations below. Each primitive is certified against the central
finite-difference oracle (see ``gradcheck.py``); composites such as
``layer_norm`` and ``pixel_shuffle`` inherit their gradients from the
primitives they are built on but are certified as well.

Tie-breaking convention for non-smooth points: ``maximum``/``minimum``
route the full subgradient to the *first* argument at exact ties,
``relu`` uses slope 1 at 0, ``absolute`` uses slope 0 at 0. Gradcheck
sampling stays away from these measure-zero points.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, Parameter, ShapeError, as_tensor

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _match_scalar(x, ref):
    """Lift ``x`` to a Tensor; bare scalars adopt the tensor operand's
    dtype so float32 graphs are not silently upcast to float64."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.ndim == 0 and isinstance(ref, Tensor):
        return Tensor(arr.astype(ref.data.dtype))
    return as_tensor(x)


def _binary(a, b, fwd, vjp_a, vjp_b):
    a, b = _match_scalar(a, b), _match_scalar(b, a)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{fwd.__name__ if hasattr(fwd, '__name__') else 'op'}: "
                         f"incompatible shapes {a.shape} and {b.shape}") from e

    def vjp(g):
        ga = _unbroadcast(vjp_a(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(vjp_b(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(a, b, np.divide,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def maximum(a, b):
    """Elementwise max; ties send the gradient to the first argument."""
    return _binary(a, b, np.maximum,
                   lambda g, x, y: g * (x >= y), lambda g, x, y: g * (y > x))


def minimum(a, b):
    """Elementwise min; ties send the gradient to the first argument."""
    return _binary(a, b, np.minimum,
                   lambda g, x, y: g * (x <= y), lambda g, x, y: g * (y < x))


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def _unary(x, fwd_data, dydx_from):
    x = as_tensor(x)
    y = fwd_data(x.data)

    def vjp(g):
        return (g * dydx_from(x.data, y),)

    return Tensor._from_op(y, (x,), vjp)


def neg(x):
    x = as_tensor(x)
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,))


def exp(x):
    return _unary(x, np.exp, lambda xd, yd: yd)


def log(x):
    return _unary(x, np.log, lambda xd, yd: 1.0 / xd)


def sqrt(x):
    return _unary(x, np.sqrt, lambda xd, yd: 0.5 / yd)


def absolute(x):
    return _unary(x, np.abs, lambda xd, yd: np.sign(xd))


def tanh(x):
    return _unary(x, np.tanh, lambda xd, yd: 1.0 - yd * yd)


def sigmoid(x):
    def fwd(xd):
        out = np.empty_like(xd)
        pos = xd >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        e = np.exp(xd[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    return _unary(x, fwd, lambda xd, yd: yd * (1.0 - yd))


def relu(x):
    return _unary(x, lambda xd: np.maximum(xd, 0.0),
                  lambda xd, yd: (xd >= 0).astype(xd.dtype))


def gelu(x):
    """Exact (erf-based) GELU."""
    def fwd(xd):
        return 0.5 * xd * (1.0 + erf(xd * _INV_SQRT2))

    def dydx(xd, yd):
        cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return cdf + xd * pdf

    return _unary(x, fwd, dydx)


def power(x, p):
    """x**p for a fixed scalar exponent p."""
    p = float(p)
    return _unary(x, lambda xd: xd ** p,
                  lambda xd, yd: p * xd ** (p - 1.0))


def square(x):
    return _unary(x, np.square, lambda xd, yd: 2.0 * xd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return Tensor._from_op(np.asarray(y), (x,), vjp)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    y = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else x.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, x.shape).copy(),)

    return Tensor._from_op(np.asarray(y), (x,), vjp)


def softmax(x, axis):
    """Numerically stable softmax over one named axis."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._from_op(y, (x,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    y = x.data.reshape(shape)
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return Tensor._from_op(y, (x,), vjp)


def transpose(x, axes):
    x = as_tensor(x)
    y = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return Tensor._from_op(y, (x,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tensors, vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return Tensor._from_op(data, tensors, vjp)


def getitem(x, key):
    """Basic (slice/int) indexing. Advanced indexing goes via gather_rows."""
    x = as_tensor(x)
    y = x.data[key]
    shape = x.shape

    def vjp(g):
        buf = np.zeros(shape, dtype=g.dtype)
        buf[key] += g
        return (buf,)

    return Tensor._from_op(np.ascontiguousarray(y), (x,), vjp)


def gather_rows(x, idx):
    """Select rows along axis 0 by an integer index array (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    y = x.data[idx]

    def vjp(g):
        buf = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(buf, idx, g)
        return (buf,)

    return Tensor._from_op(y, (x,), vjp)


def scatter_rows(base, idx, rows):
    """Copy of ``base`` with ``rows`` written at unique row indices ``idx``."""
    base, rows = as_tensor(base), as_tensor(rows)
    idx = np.asarray(idx, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ShapeError("scatter_rows requires unique indices")
    if rows.shape != (len(idx),) + base.shape[1:]:
        raise ShapeError(f"scatter_rows: rows shape {rows.shape} does not fit "
                         f"{len(idx)} rows of base {base.shape}")
    data = base.data.copy()
    data[idx] = rows.data

    def vjp(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            gb[idx] = 0.0
        gr = g[idx] if rows.requires_grad else None
        return gb, gr

    return Tensor._from_op(data, (base, rows), vjp)


def where(mask, a, b):
    """Select by a constant boolean mask (not differentiable in the mask)."""
    a, b = _match_scalar(a, b), _match_scalar(b, a)
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy stacking semantics (ndim >= 2 each)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim>=2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(data, (a, b), vjp)


def linear(x, w, b=None):
    """x @ w (+ b). Row-major samples: x is (..., in), w is (in, out)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalization over the last axis (composite of primitives)."""
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(square(centered), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(centered, inv), gamma), beta)


# ---------------------------------------------------------------------------
# convolution (stride 1, symmetric zero padding) via shift-and-matmul
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, padding=1):
    """2-D convolution: x (Cin,H,W), w (Cout,Cin,kh,kw) -> (Cout,Ho,Wo)."""
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight {cin_w}")
    ho, wo = h + 2 * padding - kh + 1, wid + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for {h}x{wid}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    # im2col: one fat-K GEMM per pass beats kh*kw skinny GEMMs by a wide
    # margin; the column matrix is kept for the weight gradient.
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, -1)
    out = (w.data.reshape(cout, -1) @ cols).reshape(cout, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]

    def vjp(g):
        gm = g.reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            qh, qw = kh - 1 - padding, kw - 1 - padding
            if min(qh, qw) >= 0:
                # Input gradient is correlation with the flipped kernel.
                gp = np.pad(g, ((0, 0), (qh, qh), (qw, qw)))
                wing = sliding_window_view(gp, (kh, kw), axis=(1, 2))
                wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1])
                gx = np.tensordot(wflip, wing, axes=([0, 2, 3], [0, 3, 4]))
            else:
                gcols = (w.data.reshape(cout, -1).T @ gm).reshape(
                    cin, kh, kw, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + ho, j:j + wo] += gcols[:, i, j]
                gx = gxp[:, padding:padding + h, padding:padding + wid].copy()
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=1)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, parents, vjp)


def conv3d(x, w, b=None, padding=1):
    """3-D convolution: x (Cin,X,Y,Z), w (Cout,Cin,kx,ky,kz)."""
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    cin, dx, dy, dz = x.shape
    cout, cin_w, kx, ky, kz = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d: input channels {cin} != weight {cin_w}")
    ox = dx + 2 * padding - kx + 1
    oy = dy + 2 * padding - ky + 1
    oz = dz + 2 * padding - kz + 1
    if min(ox, oy, oz) <= 0:
        raise ShapeError("conv3d: kernel too large for input")

    pad = ((0, 0), (padding, padding), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad)
    win = sliding_window_view(xp, (kx, ky, kz), axis=(1, 2, 3))
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * kx * ky * kz, -1)
    out = (w.data.reshape(cout, -1) @ cols).reshape(cout, ox, oy, oz)
    if b is not None:
        out = out + b.data[:, None, None, None]

    def vjp(g):
        gm = g.reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            q = kx - 1 - padding, ky - 1 - padding, kz - 1 - padding
            if min(q) >= 0:
                gp = np.pad(g, ((0, 0), (q[0], q[0]), (q[1], q[1]),
                                (q[2], q[2])))
                wing = sliding_window_view(gp, (kx, ky, kz), axis=(1, 2, 3))
                wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1, ::-1])
                gx = np.tensordot(wflip, wing, axes=([0, 2, 3, 4],
                                                     [0, 4, 5, 6]))
            else:
                gcols = (w.data.reshape(cout, -1).T @ gm).reshape(
                    cin, kx, ky, kz, ox, oy, oz)
                gxp = np.zeros_like(xp)
                for i in range(kx):
                    for j in range(ky):
                        for k in range(kz):
                            gxp[:, i:i + ox, j:j + oy, k:k + oz] += \
                                gcols[:, i, j, k]
                gx = gxp[:, padding:padding + dx, padding:padding + dy,
                         padding:padding + dz].copy()
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=1)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, parents, vjp)


def pixel_shuffle(x, r):
    """Depth-to-space: (C*r*r, h, w) -> (C, r*h, r*w). Bijective."""
    x = as_tensor(x)
    c2, h, w = x.shape
    if r < 1 or c2 % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {c2} channels not divisible by r^2={r*r}")
    c = c2 // (r * r)
    y = reshape(x, (c, r, r, h, w))
    y = transpose(y, (0, 3, 1, 4, 2))
    return reshape(y, (c, h * r, w * r))


# ---------------------------------------------------------------------------
# grid sampling
# ---------------------------------------------------------------------------

def _sample_csr(n_loc, idxs, weights, dtype):
    """Sparse (Q, n_loc) interpolation operator: row q holds weights[k][q]
    at column idxs[k][q]. ``m @ grid`` samples; ``m.T @ g`` scatters sample
    gradients back onto the grid. Duplicate corners from border clamps
    merge on construction."""
    q = idxs[0].shape[0]
    rows = np.tile(np.arange(q, dtype=np.intp), len(idxs))
    cols = np.concatenate(idxs)
    vals = np.concatenate(weights).astype(dtype, copy=False)
    return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(q, n_loc))


def bilinear_sample(fmap, coords):
    """Sample (C,H,W) at pixel-center positions coords (Q,2) as (u,v).

    The texel (row i, col j) sits at position (j+0.5, i+0.5); positions
    outside the map clamp to the border (zero positional gradient there).
    Differentiable in both the map and the coordinates.
    """
    fmap, coords = as_tensor(fmap), as_tensor(coords)
    c, h, w = fmap.shape
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: coords must be (Q,2), got {coords.shape}")

    gx = coords.data[:, 0] - 0.5
    gy = coords.data[:, 1] - 0.5
    in_x = (gx >= 0.0) & (gx <= w - 1.0)
    in_y = (gy >= 0.0) & (gy <= h - 1.0)
    gx = np.clip(gx, 0.0, w - 1.0)
    gy = np.clip(gy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(gx), w - 2).astype(np.intp) if w > 1 else np.zeros_like(gx, np.intp)
    y0 = np.minimum(np.floor(gy), h - 2).astype(np.intp) if h > 1 else np.zeros_like(gy, np.intp)
    tx = (gx - x0) if w > 1 else np.zeros_like(gx)
    ty = (gy - y0) if h > 1 else np.zeros_like(gy)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    i00, i01 = y0 * w + x0, y0 * w + x1
    i10, i11 = y1 * w + x0, y1 * w + x1
    w00 = (1 - tx) * (1 - ty)
    w01 = tx * (1 - ty)
    w10 = (1 - tx) * ty
    w11 = tx * ty
    # Single sparse interpolation operator shared by forward (sam @ map)
    # and backward (sam.T @ g): one pass instead of four corner gathers.
    flat_t = np.ascontiguousarray(fmap.data.reshape(c, h * w).T)
    sam = _sample_csr(h * w, (i00, i01, i10, i11),
                      (w00, w01, w10, w11), fmap.dtype)
    out = np.asarray(sam @ flat_t)

    def vjp(g):
        gmap = gcoord = None
        if fmap.requires_grad:
            gmap = np.asarray(sam.T @ g).T.reshape(c, h, w).astype(
                fmap.dtype, copy=False)
        if coords.requires_grad:
            f00, f01 = flat_t[i00], flat_t[i01]
            f10, f11 = flat_t[i10], flat_t[i11]
            dx = ((f01 - f00) * (1 - ty)[:, None] + (f11 - f10) * ty[:, None])
            dy = ((f10 - f00) * (1 - tx)[:, None] + (f11 - f01) * tx[:, None])
            gu = np.sum(g * dx, axis=1) * in_x
            gv = np.sum(g * dy, axis=1) * in_y
            gcoord = np.stack([gu, gv], axis=1).astype(coords.dtype)
        return gmap, gcoord

    return Tensor._from_op(out, (fmap, coords), vjp)


def _trilinear_setup(shape_xyz, pts):
    """Shared corner/weight bookkeeping for fractional index coords (Q,3)."""
    nx, ny, nz = shape_xyz
    p = pts
    inside = [(p[:, a] >= 0.0) & (p[:, a] <= s - 1.0)
              for a, s in enumerate((nx, ny, nz))]
    cx = np.clip(p[:, 0], 0.0, nx - 1.0)
    cy = np.clip(p[:, 1], 0.0, ny - 1.0)
    cz = np.clip(p[:, 2], 0.0, nz - 1.0)

    def base(cv, n):
        if n == 1:
            return np.zeros(len(cv), np.intp), np.zeros_like(cv)
        b = np.minimum(np.floor(cv), n - 2).astype(np.intp)
        return b, cv - b

    x0, tx = base(cx, nx)
    y0, ty = base(cy, ny)
    z0, tz = base(cz, nz)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    corners = []
    for a, xa, wx in ((0, x0, None), (1, x1, None)):
        for b_, yb, wy in ((0, y0, None), (1, y1, None)):
            for c_, zc, wz in ((0, z0, None), (1, z1, None)):
                wx_ = tx if a else (1 - tx)
                wy_ = ty if b_ else (1 - ty)
                wz_ = tz if c_ else (1 - tz)
                idx = (xa * ny + yb) * nz + zc
                corners.append(((a, b_, c_), idx, wx_, wy_, wz_))
    return corners, (tx, ty, tz), inside


def trilinear_sample(vol, pts):
    """Sample (C,X,Y,Z) at fractional index coords pts (Q,3) -> (Q,C).

    Out-of-grid points clamp to the boundary cell. Differentiable in the
    volume and in the coordinates.
    """
    vol, pts = as_tensor(vol), as_tensor(pts)
    if vol.ndim != 4:
        raise ShapeError(f"trilinear_sample: volume must be (C,X,Y,Z), got {vol.shape}")
    c = vol.shape[0]
    nx, ny, nz = vol.shape[1:]
    corners, (tx, ty, tz), inside = _trilinear_setup((nx, ny, nz), pts.data)
    flat_t = np.ascontiguousarray(vol.data.reshape(c, -1).T)
    idxs = [idx for _, idx, _, _, _ in corners]
    weights = [wx * wy * wz for _, _, wx, wy, wz in corners]
    sam = _sample_csr(nx * ny * nz, idxs, weights, vol.dtype)
    out = np.asarray(sam @ flat_t)

    def vjp(g):
        gvol = gpts = None
        if vol.requires_grad:
            gvol = np.asarray(sam.T @ g).T.reshape(vol.shape).astype(
                vol.dtype, copy=False)
        if pts.requires_grad:
            gp = np.zeros_like(pts.data)
            for signbits, idx, wx, wy, wz in corners:
                a, b_, c_ = signbits
                sx = 1.0 if a else -1.0
                sy = 1.0 if b_ else -1.0
                sz = 1.0 if c_ else -1.0
                gv = np.sum(g * flat_t[idx], axis=1)
                gp[:, 0] += gv * sx * wy * wz
                gp[:, 1] += gv * wx * sy * wz
                gp[:, 2] += gv * wx * wy * sz
            for a in range(3):
                gp[:, a] *= inside[a]
            gpts = gp.astype(pts.dtype)
        return gvol, gpts

    return Tensor._from_op(out, (vol, pts), vjp)


def trilinear_spatial_grad(vol, pts):
    """Spatial gradient of the trilinear interpolant of a scalar grid.

    vol is (X,Y,Z); pts are fractional index coords (Q,3). Returns (Q,3)
    in index units (divide by the voxel size for world units). Zero along
    any clamped axis (the clamped field is constant there). Differentiable
    with respect to the grid values; pts are treated as constants.
    """
    vol, pts = as_tensor(vol), as_tensor(pts)
    if vol.ndim != 3:
        raise ShapeError(f"trilinear_spatial_grad: volume must be (X,Y,Z), got {vol.shape}")
    nx, ny, nz = vol.shape
    corners, (tx, ty, tz), inside = _trilinear_setup((nx, ny, nz), pts.data)
    flat = vol.data.ravel()
    mask = np.stack([m.astype(vol.dtype) for m in inside], axis=1)

    out = np.zeros((pts.shape[0], 3), dtype=vol.dtype)
    for (a, b_, c_), idx, wx, wy, wz in corners:
        v = flat[idx]
        sx = 1.0 if a else -1.0
        sy = 1.0 if b_ else -1.0
        sz = 1.0 if c_ else -1.0
        out[:, 0] += v * sx * wy * wz
        out[:, 1] += v * wx * sy * wz
        out[:, 2] += v * wx * wy * sz
    out *= mask

    def vjp(g):
        if not vol.requires_grad:
            return (None,)
        gm = g * mask
        acc = np.zeros(nx * ny * nz)
        for (a, b_, c_), idx, wx, wy, wz in corners:
            sx = 1.0 if a else -1.0
            sy = 1.0 if b_ else -1.0
            sz = 1.0 if c_ else -1.0
            contrib = gm[:, 0] * sx * wy * wz \
                + gm[:, 1] * wx * sy * wz \
                + gm[:, 2] * wx * wy * sz
            acc += np.bincount(idx, weights=contrib.astype(np.float64),
                               minlength=nx * ny * nz)
        return (acc.reshape(vol.shape).astype(vol.dtype),)

    return Tensor._from_op(out, (vol,), vjp)


# ---------------------------------------------------------------------------
# operator sugar on Tensor
# ---------------------------------------------------------------------------

def _bind_operators():
    Tensor.__add__ = lambda a, b: add(a, b)
    Tensor.__radd__ = lambda a, b: add(b, a)
    Tensor.__sub__ = lambda a, b: sub(a, b)
    Tensor.__rsub__ = lambda a, b: sub(b, a)
    Tensor.__mul__ = lambda a, b: mul(a, b)
    Tensor.__rmul__ = lambda a, b: mul(b, a)
    Tensor.__truediv__ = lambda a, b: div(a, b)
    Tensor.__rtruediv__ = lambda a, b: div(b, a)
    Tensor.__neg__ = neg
    Tensor.__pow__ = power
    Tensor.__matmul__ = matmul
    Tensor.__getitem__ = getitem
    Tensor.sum = reduce_sum
    Tensor.mean = reduce_mean
    Tensor.reshape = reshape


_bind_operators()
