"""Finite-difference certification of the primitive set.

The oracle is a plain central difference in 64-bit floats; nothing here
reuses the tape, so a bug in a VJP cannot hide itself. ``primitive_suite``
runs every primitive on randomized instances and is what the CLI and the
acceptance tests call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, NonFiniteError
from . import ops


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.op_name:<24s} rel={self.max_rel_error:.3e} "
                f"abs={self.max_abs_error:.3e}")


def finite_difference_gradient(f, xs, eps=1e-5):
    """Central-difference gradient of a scalar function of numpy arrays.

    f takes the arrays positionally and returns a float; inputs must be
    64-bit. Mutates each coordinate in place and restores it.
    """
    grads = []
    for x in xs:
        if x.dtype != np.float64:
            raise TypeError(f"finite differences need float64, got {x.dtype}")
        g = np.zeros_like(x)
        for j in range(x.size):
            orig = x.flat[j]
            x.flat[j] = orig + eps
            fp = float(f(*xs))
            x.flat[j] = orig - eps
            fm = float(f(*xs))
            x.flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(
                    f"non-finite value while probing coordinate {j}")
            g.flat[j] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def gradient_check(name, f, xs, rtol=1e-4, atol=1e-7, eps=1e-5):
    """Compare tape gradients of ``f`` against the finite-difference oracle.

    ``f`` maps Tensors to a scalar Tensor. Per-element relative error uses
    a floored denominator so the pass rule is the usual allclose form:
    |a-n| <= max(rtol*|a|, rtol*|n|, atol).
    """
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    out = f(*ts)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data)
                for t in ts]

    def fwd(*arrays):
        return f(*[Tensor(a.copy()) for a in arrays]).item()

    numeric = finite_difference_gradient(fwd, xs, eps=eps)

    floor = atol / rtol
    max_rel = 0.0
    max_abs = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        if diff.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        max_abs = max(max_abs, float(diff.max()))
        max_rel = max(max_rel, float((diff / denom).max()))
    passed = (max_rel <= rtol) or (max_abs <= atol)
    return GradCheckReport(name, max_rel, max_abs, passed)


def _away_from(rng, shape, other, margin=0.05):
    """Uniform values kept at least ``margin`` away from ``other`` (for kinks)."""
    x = rng.uniform(-2.0, 2.0, size=shape)
    d = x - other
    x = np.where(np.abs(d) < margin, x + np.sign(d + 1e-12) * margin, x)
    return x


def _projected(rng, g, xs):
    """Close ``g`` over a frozen random projection to a scalar.

    The weight is drawn once (from a dry forward's output shape) so the
    finite-difference probes and the backward pass see the same function.
    """
    out_shape = g(*[Tensor(np.asarray(x)) for x in xs]).shape
    w = Tensor(rng.standard_normal(out_shape))

    def f(*ts):
        return ops.reduce_sum(ops.mul(g(*ts), w))

    return f


def _safe_coords_2d(rng, q, h, w):
    """Pixel coords whose 1e-5 FD box never crosses a texel or the border."""
    u = rng.integers(0, w - 1, size=q) + rng.uniform(0.2, 0.8, size=q) + 0.5
    v = rng.integers(0, h - 1, size=q) + rng.uniform(0.2, 0.8, size=q) + 0.5
    return np.stack([u, v], axis=1)


def _safe_coords_3d(rng, q, nx, ny, nz):
    cols = [rng.integers(0, n - 1, size=q) + rng.uniform(0.2, 0.8, size=q)
            for n in (nx, ny, nz)]
    return np.stack(cols, axis=1)


def _primitive_cases(rng):
    """Build (name, scalar function, input arrays) cases, one instance each."""
    n = rng.standard_normal
    cases = []

    def case(name, g, xs):
        xs = [np.asarray(x, dtype=np.float64) for x in xs]
        cases.append((name, _projected(rng, g, xs), xs))

    a34, b34 = n((3, 4)), n((3, 4))
    case("add", ops.add, [a34, b34])
    case("sub", ops.sub, [a34, b34])
    case("mul", ops.mul, [a34, b34])

    den = n((3, 4))
    den = np.where(np.abs(den) < 0.5, den + np.sign(den + 1e-12) * 0.5, den)
    case("div", ops.div, [a34, den])

    mb = _away_from(rng, (3, 4), a34)
    case("maximum", ops.maximum, [a34, mb])
    case("minimum", ops.minimum, [a34, mb])

    # broadcasting path of the binary ops
    case("add_broadcast", ops.add, [n((3, 1, 4)), n((5, 1))])
    case("mul_broadcast", ops.mul, [n((2, 3, 4)), n((4,))])

    case("neg", ops.neg, [n((4, 5))])
    case("exp", ops.exp, [rng.uniform(-1.5, 1.5, (4, 5))])
    case("log", ops.log, [rng.uniform(0.4, 3.0, (4, 5))])
    case("sqrt", ops.sqrt, [rng.uniform(0.3, 4.0, (4, 5))])
    case("absolute", ops.absolute, [_away_from(rng, (4, 5), 0.0)])
    case("tanh", ops.tanh, [n((4, 5))])
    case("sigmoid", ops.sigmoid, [3.0 * n((4, 5))])
    case("relu", ops.relu, [_away_from(rng, (4, 5), 0.0)])
    case("gelu", ops.gelu, [2.0 * n((4, 5))])
    case("power", lambda a: ops.power(a, 3.0), [rng.uniform(0.3, 2.0, (4, 5))])
    case("square", ops.square, [n((4, 5))])

    case("sum_all", ops.reduce_sum, [n((3, 4, 5))])
    case("sum_axis", lambda a: ops.reduce_sum(a, axis=1), [n((3, 4, 5))])
    case("mean_all", ops.reduce_mean, [n((3, 4, 5))])
    case("mean_axis", lambda a: ops.reduce_mean(a, axis=2, keepdims=True),
         [n((3, 4, 5))])
    case("softmax", lambda a: ops.softmax(a, axis=1), [2.0 * n((6, 7))])

    case("reshape", lambda a: ops.reshape(a, (5, 12)), [n((3, 4, 5))])
    case("transpose", lambda a: ops.transpose(a, (2, 0, 1)), [n((3, 4, 5))])
    case("concat", lambda a, b: ops.concat([a, b], axis=1),
         [n((3, 2)), n((3, 5))])
    case("stack", lambda a, b: ops.stack([a, b], axis=0),
         [n((4, 3)), n((4, 3))])
    case("getitem", lambda a: a[1:3, ::2], [n((4, 6))])

    idx_g = rng.integers(0, 5, size=8)
    case("gather_rows", lambda a: ops.gather_rows(a, idx_g), [n((5, 3))])
    idx_s = rng.permutation(6)[:3]
    case("scatter_rows", lambda a, r: ops.scatter_rows(a, idx_s, r),
         [n((6, 4)), n((3, 4))])
    msk = rng.random((4, 5)) > 0.5
    case("where", lambda a, b: ops.where(msk, a, b), [n((4, 5)), n((4, 5))])

    case("matmul", ops.matmul, [n((3, 4)), n((4, 5))])
    case("matmul_batched", ops.matmul, [n((2, 3, 4)), n((4, 5))])
    case("linear", ops.linear, [n((5, 3)), n((3, 4)), n((4,))])
    case("layer_norm", ops.layer_norm,
         [n((4, 6)), 1.0 + 0.2 * n((6,)), 0.2 * n((6,))])

    case("conv2d", lambda a, w, b: ops.conv2d(a, w, b, padding=1),
         [n((2, 5, 5)), 0.5 * n((3, 2, 3, 3)), 0.2 * n((3,))])
    case("conv3d", lambda a, w, b: ops.conv3d(a, w, b, padding=1),
         [n((2, 4, 4, 3)), 0.4 * n((2, 2, 3, 3, 3)), 0.2 * n((2,))])
    case("pixel_shuffle", lambda a: ops.pixel_shuffle(a, 2), [n((8, 3, 3))])

    case("bilinear_sample", ops.bilinear_sample,
         [n((2, 5, 6)), _safe_coords_2d(rng, 7, 5, 6)])
    case("trilinear_sample", ops.trilinear_sample,
         [n((2, 4, 5, 3)), _safe_coords_3d(rng, 6, 4, 5, 3)])

    spts = Tensor(_safe_coords_3d(rng, 6, 4, 5, 3))
    case("trilinear_spatial_grad",
         lambda v: ops.trilinear_spatial_grad(v, spts), [n((4, 5, 3))])

    return cases


def primitive_suite(instances=10, seed=20240901, rtol=1e-4, atol=1e-7):
    """Run every primitive ``instances`` times; one worst-case report each."""
    worst: dict[str, GradCheckReport] = {}
    for i in range(instances):
        rng = np.random.default_rng(seed + i)
        for name, f, xs in _primitive_cases(rng):
            rep = gradient_check(name, f, xs, rtol=rtol, atol=atol)
            prev = worst.get(name)
            if prev is None or (prev.passed and
                                (not rep.passed
                                 or rep.max_rel_error > prev.max_rel_error)):
                worst[name] = rep
    return list(worst.values())
