"""Differentiable volumetric rendering over decoded field grids.

The pipeline per pixel: clip the ray to the scene bounds, draw stratified
coarse samples, reweight them without gradients to draw importance
samples, then run the differentiable pass — trilinear field lookups,
spherical-harmonic color, SDF-to-opacity conversion, and front-to-back
compositing. Color, depth, and semantics are plain weighted sums along
the ray (depth deliberately unnormalized).

Compositing accumulates strictly sequentially (never pairwise) so that
inserting a zero-opacity duplicate sample cannot perturb a single bit of
the result.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, Parameter, ShapeError, ops
from .scenes import ray_aabb

RAY_EPS = 1e-4          # t_near clamp for origins inside the bounds
SIGMA_FLOOR = 1e-12     # opacity denominator clamp (deep-inside underflow)
GRADNORM_EPS = 1e-12    # inside sqrt of the Eikonal gradient norm

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
         1.0925484305920792, 0.5462742152960396)


# ---------------------------------------------------------------------------
# geometry of the voxel grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridGeometry:
    bounds_min: tuple
    bounds_max: tuple
    shape: tuple   # (X, Y, Z)

    def __post_init__(self):
        object.__setattr__(self, "bounds_min",
                           tuple(float(v) for v in self.bounds_min))
        object.__setattr__(self, "bounds_max",
                           tuple(float(v) for v in self.bounds_max))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ShapeError(f"grid needs three positive axes, got "
                             f"{self.shape}")
        if any(hi <= lo for lo, hi in zip(self.bounds_min, self.bounds_max)):
            raise ShapeError(f"degenerate bounds {self.bounds_min} .. "
                             f"{self.bounds_max}")

    @property
    def n_voxels(self):
        return int(np.prod(self.shape))

    @property
    def voxel_size(self):
        lo, hi = np.asarray(self.bounds_min), np.asarray(self.bounds_max)
        return (hi - lo) / np.asarray(self.shape)

    def world_to_index(self, points):
        """World points (...,3) -> fractional voxel-center index coords."""
        lo = np.asarray(self.bounds_min)
        return (np.asarray(points) - lo) / self.voxel_size - 0.5

    def voxel_centers(self):
        """(X,Y,Z,3) world coordinates; all strictly inside the bounds."""
        axes = [np.asarray(self.bounds_min)[a]
                + (np.arange(self.shape[a]) + 0.5) * self.voxel_size[a]
                for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def sh_basis(l_max, dirs):
    """Real spherical harmonics (Condon-Shortley-free) up to l_max <= 2.

    dirs (Q,3) unit vectors -> (Q, (l_max+1)^2).
    """
    if l_max > 2 or l_max < 0:
        raise ShapeError(f"sh_basis supports l_max 0..2, got {l_max}")
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    cols = [np.full(len(d), SH_C0)]
    if l_max >= 1:
        cols += [SH_C1 * y, SH_C1 * z, SH_C1 * x]
    if l_max >= 2:
        cols += [SH_C2[0] * x * y,
                 SH_C2[1] * y * z,
                 SH_C2[2] * (3.0 * z * z - 1.0),
                 SH_C2[3] * x * z,
                 SH_C2[4] * (x * x - y * y)]
    return np.stack(cols, axis=1)


def sh_dim(l_max):
    """SH coefficient channels per field: 3 colors x (l_max+1)^2 bases."""
    return 3 * (l_max + 1) ** 2


def sh_color(k, direction, l_max):
    """Color of one sample: per-channel sigmoid of the SH expansion.

    k is a length-D coefficient vector laid out color-major
    (channel = color*(l_max+1)^2 + basis); direction is a unit 3-vector.
    """
    k = k if isinstance(k, Tensor) else Tensor(k)
    nb = (l_max + 1) ** 2
    if k.shape != (3 * nb,):
        raise ShapeError(f"sh_color: expected {3 * nb} coefficients, "
                         f"got shape {k.shape}")
    basis = sh_basis(l_max, np.asarray(direction)[None]).astype(k.dtype)
    k3 = ops.reshape(k, (3, nb))
    return ops.sigmoid(ops.reduce_sum(ops.mul(k3, Tensor(basis)), axis=1))


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class RenderFields:
    """Decoded grids: SDF S (X,Y,Z), SH coefficients K (D,X,Y,Z) laid out
    as channel = color*(l_max+1)^2 + basis, semantics F (C_sem,X,Y,Z),
    and log-parameterized sharpness (s = exp(log_s) > 0 always)."""
    S: Tensor
    K: Tensor
    F: Tensor
    log_s: Tensor
    geometry: GridGeometry
    l_max: int

    def __post_init__(self):
        if self.K.shape[0] != sh_dim(self.l_max):
            raise ShapeError(f"K has {self.K.shape[0]} channels, expected "
                             f"{sh_dim(self.l_max)} for l_max={self.l_max}")

    def detach(self):
        return RenderFields(self.S.detach(), self.K.detach(),
                            self.F.detach(), self.log_s.detach(),
                            self.geometry, self.l_max)


class FieldDecoder:
    """Shallow 3D CNN head: two 3x3x3 convolutions with a GELU between,
    emitting 1 + D + C_semantic channels split into (S, K, F). No
    per-point network anywhere downstream."""

    def __init__(self, store, c_in, l_max, c_semantic, rng, prefix="decoder"):
        d = sh_dim(l_max)
        c_out = 1 + d + c_semantic
        k = rng.standard_normal((c_in, c_in, 3, 3, 3)) * np.sqrt(2.0 / (27 * c_in))
        self.w1 = store.add(f"{prefix}.w1", k)
        self.b1 = store.add(f"{prefix}.b1", np.zeros(c_in))
        k2 = rng.standard_normal((c_out, c_in, 3, 3, 3)) * (0.05 * np.sqrt(2.0 / (27 * c_in)))
        self.w2 = store.add(f"{prefix}.w2", k2)
        b2 = np.zeros(c_out)
        b2[0] = 0.25  # start with positive SDF (empty space) for stability
        self.b2 = store.add(f"{prefix}.b2", b2)
        self.log_s = store.add(f"{prefix}.log_s", np.array(np.log(10.0)))
        self.l_max = l_max
        self.c_semantic = c_semantic

    def forward(self, volume, geometry):
        h = ops.gelu(ops.conv3d(volume, self.w1, self.b1, padding=1))
        out = ops.conv3d(h, self.w2, self.b2, padding=1)
        d = sh_dim(self.l_max)
        s = ops.reshape(out[0], out.shape[1:])
        k = out[1:1 + d]
        f = out[1 + d:]
        return RenderFields(s, k, f, self.log_s, geometry, self.l_max)


def decode_fields(volume, decoder, geometry):
    return decoder.forward(volume, geometry)


def raw_fields(store, geometry, l_max, c_semantic, sdf_init=0.25,
               prefix="fields"):
    """Directly learnable grids (encoder bypassed) for field-fitting runs."""
    shape = geometry.shape
    s = store.add(f"{prefix}.S", np.full(shape, sdf_init))
    k = store.add(f"{prefix}.K", np.zeros((sh_dim(l_max),) + shape))
    f = store.add(f"{prefix}.F", np.zeros((c_semantic,) + shape))
    log_s = store.add(f"{prefix}.log_s", np.array(np.log(10.0)))
    return RenderFields(s, k, f, log_s, geometry, l_max)


# ---------------------------------------------------------------------------
# rays and samplers
# ---------------------------------------------------------------------------

@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = 0.0


@dataclass
class SamplerConfig:
    n_coarse: int = 32
    n_fine: int = 8


def ray_from_pixel(cam, u, v):
    """Ray through pixel column u, row v (centers at +0.5). Unit direction."""
    from .scenes import pixel_rays
    origins, dirs = pixel_rays(cam, np.array([v]), np.array([u]))
    return Ray(origins[0], dirs[0])


def aabb_clip(origins, dirs, bounds_min, bounds_max):
    """(t_near, t_far, hit mask) for rays against the scene bounds.

    t_near is clamped to RAY_EPS so origins inside the box still march.
    """
    t0, t1 = ray_aabb(np.atleast_2d(origins), np.atleast_2d(dirs),
                      np.asarray(bounds_min), np.asarray(bounds_max))
    near = np.maximum(t0, RAY_EPS)
    hit = t1 > near
    return near, t1, hit


def stratified_samples(t_near, t_far, n, rng):
    """One uniform draw per equal-width bin; (Q,) bounds -> (Q,n) sorted."""
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    q = t_near.shape[0]
    u = rng.random((q, n))
    edges = (np.arange(n) + u) / n
    return t_near[:, None] + edges * (t_far - t_near)[:, None]


def importance_samples(t_coarse, weights, n_fine, rng, t_near, t_far):
    """Inverse-CDF draws from the piecewise-constant PMF over coarse bins.

    Bin j spans [t_j, t_{j+1}] with mass w_j (the left endpoint's weight);
    rays whose weights are all zero fall back to uniform over [t_near, t_far].
    """
    t_coarse = np.asarray(t_coarse, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)[:, :-1].copy()
    q, nb = w.shape
    u = rng.random((q, n_fine))

    total = w.sum(axis=1, keepdims=True)
    degenerate = total[:, 0] <= 0.0
    w[degenerate] = 1.0  # uniform PMF fallback
    total = w.sum(axis=1, keepdims=True)
    pmf = w / total
    cdf = np.cumsum(pmf, axis=1)
    cdf[:, -1] = 1.0  # guard against rounding drift

    # bin index of each draw: count of cdf entries strictly below u
    idx = np.sum(cdf[:, None, :] < u[:, :, None], axis=2)
    idx = np.minimum(idx, nb - 1)
    cdf_lo = np.take_along_axis(np.concatenate([np.zeros((q, 1)), cdf], axis=1),
                                idx, axis=1)
    mass = np.take_along_axis(pmf, idx, axis=1)
    frac = np.where(mass > 0, (u - cdf_lo) / np.maximum(mass, 1e-30), 0.5)
    t_lo = np.take_along_axis(t_coarse, idx, axis=1)
    t_hi = np.take_along_axis(t_coarse, idx + 1, axis=1)
    fine = t_lo + np.clip(frac, 0.0, 1.0) * (t_hi - t_lo)
    if np.any(degenerate):
        span = (np.asarray(t_far) - np.asarray(t_near))[degenerate, None]
        fine[degenerate] = np.asarray(t_near)[degenerate, None] \
            + u[degenerate] * span
    return fine


# ---------------------------------------------------------------------------
# opacity and compositing
# ---------------------------------------------------------------------------

def alpha_from_sdf(sdf, sharpness):
    """Opacity per sample from consecutive SDF values (Eq. below).

    sdf: (Q, N) Tensor of per-sample SDF values in ray order. The last
    sample duplicates its own SDF, so alpha_N = 0 exactly:
        alpha_j = max((sigma(s*sdf_j) - sigma(s*sdf_{j+1})) / sigma(s*sdf_j), 0)
    The denominator is floored at SIGMA_FLOOR to survive sigmoid underflow
    deep inside geometry.
    """
    n = sdf.shape[1]
    ext = ops.concat([sdf, sdf[:, n - 1:n]], axis=1)
    sig = ops.sigmoid(ops.mul(sharpness, ext))
    prev = sig[:, :n]
    nxt = sig[:, 1:]
    num = ops.sub(prev, nxt)
    denom = ops.maximum(prev, SIGMA_FLOOR)
    return ops.maximum(ops.div(num, denom), 0.0)


def transmittance_and_weights(alpha):
    """T_j = prod_{k<j}(1-alpha_k), w_j = T_j*alpha_j — sequential exact."""
    q, n = alpha.shape
    one_minus = ops.sub(1.0, alpha)
    cols = [Tensor(np.ones(q, dtype=alpha.dtype))]
    for j in range(1, n):
        cols.append(ops.mul(cols[-1], one_minus[:, j - 1]))
    trans = ops.stack(cols, axis=1)
    return trans, ops.mul(trans, alpha)


def composite(weights, colors, ts, semantics):
    """Weighted sums along the ray, accumulated strictly left-to-right.

    weights (Q,N), colors (Q,N,3), ts (Q,N) constant, semantics (Q,N,C).
    Returns (rgb (Q,3), depth (Q,), sem (Q,C)).
    """
    q, n = weights.shape
    ts = np.asarray(ts)
    rgb = None
    depth = None
    sem = None
    for j in range(n):
        w = weights[:, j]
        wc = ops.reshape(w, (q, 1))
        c_term = ops.mul(wc, colors[:, j])
        d_term = ops.mul(w, Tensor(ts[:, j].astype(ts.dtype)))
        f_term = ops.mul(wc, semantics[:, j])
        rgb = c_term if rgb is None else ops.add(rgb, c_term)
        depth = d_term if depth is None else ops.add(depth, d_term)
        sem = f_term if sem is None else ops.add(sem, f_term)
    return rgb, depth, sem


# ---------------------------------------------------------------------------
# full render path
# ---------------------------------------------------------------------------

@dataclass
class RenderBatch:
    """Differentiable per-ray outputs plus everything the losses need."""
    color: Tensor        # (Q,3)
    depth: Tensor        # (Q,)
    semantic: Tensor     # (Q,C_sem)
    alpha: Tensor        # (Q,N)
    trans: Tensor        # (Q,N)
    weights: Tensor      # (Q,N)
    sdf: Tensor          # (Q,N)
    grad_norm: Tensor    # (Q,N) world-space |grad S| at each sample
    ts: np.ndarray       # (Q,N) sample distances (constants)


def _coarse_weights(fields, idx_coords, s_value, q, n):
    """No-gradient coarse pass: numpy opacities for importance sampling."""
    svol = fields.S.data[None]
    sdf = ops.trilinear_sample(Tensor(svol), Tensor(idx_coords)).data
    sdf = sdf.reshape(q, n)
    ext = np.concatenate([sdf, sdf[:, -1:]], axis=1)
    sig = 1.0 / (1.0 + np.exp(-np.clip(s_value * ext, -500, 500)))
    alpha = np.maximum((sig[:, :-1] - sig[:, 1:])
                       / np.maximum(sig[:, :-1], SIGMA_FLOOR), 0.0)
    trans = np.cumprod(np.concatenate([np.ones((q, 1)), 1.0 - alpha[:, :-1]],
                                      axis=1), axis=1)
    return trans * alpha


def render_rays(fields, origins, dirs, t_near, t_far, sampler, rng):
    """Render Q rays (already clipped to bounds) against the fields."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    q = origins.shape[0]
    geo = fields.geometry
    dtype = fields.S.dtype

    t_c = stratified_samples(t_near, t_far, sampler.n_coarse, rng)
    if sampler.n_fine > 0:
        pts_c = origins[:, None, :] + t_c[:, :, None] * dirs[:, None, :]
        idx_c = geo.world_to_index(pts_c.reshape(-1, 3)).astype(dtype)
        w_c = _coarse_weights(fields, idx_c, float(np.exp(fields.log_s.data)),
                              q, sampler.n_coarse)
        t_f = importance_samples(t_c, w_c, sampler.n_fine, rng, t_near, t_far)
        ts = np.sort(np.concatenate([t_c, t_f], axis=1), axis=1)
    else:
        ts = t_c
    n = ts.shape[1]

    pts = (origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    idx = Tensor(geo.world_to_index(pts).astype(dtype))

    sdf_flat = ops.trilinear_sample(ops.reshape(fields.S, (1,) + geo.shape), idx)
    sdf = ops.reshape(sdf_flat, (q, n))

    k_flat = ops.trilinear_sample(fields.K, idx)            # (QN, D)
    f_flat = ops.trilinear_sample(fields.F, idx)            # (QN, C_sem)

    nb = (fields.l_max + 1) ** 2
    basis = sh_basis(fields.l_max, dirs).astype(dtype)       # (Q, B)
    basis_rep = np.repeat(basis, n, axis=0)[:, None, :]      # (QN,1,B)
    k3 = ops.reshape(k_flat, (q * n, 3, nb))
    logits = ops.reduce_sum(ops.mul(k3, Tensor(basis_rep)), axis=2)
    colors = ops.reshape(ops.sigmoid(logits), (q, n, 3))
    sem = ops.reshape(f_flat, (q, n, f_flat.shape[1]))

    g_idx = ops.trilinear_spatial_grad(fields.S, idx)        # (QN,3) index units
    inv_voxel = (1.0 / geo.voxel_size).astype(dtype)
    g_world = ops.mul(g_idx, Tensor(inv_voxel[None, :]))
    grad_norm = ops.reshape(
        ops.sqrt(ops.add(ops.reduce_sum(ops.square(g_world), axis=1),
                         GRADNORM_EPS)), (q, n))

    sharp = ops.exp(fields.log_s)
    alpha = alpha_from_sdf(sdf, sharp)
    trans, weights = transmittance_and_weights(alpha)
    rgb, depth, semantic = composite(weights, colors, ts.astype(dtype), sem)

    return RenderBatch(rgb, depth, semantic, alpha, trans, weights, sdf,
                       grad_norm, ts)


@dataclass
class PixelPrediction:
    color: np.ndarray
    depth: float
    semantic: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray
    weights: np.ndarray
    ts: np.ndarray


def render_pixel(fields, ray, sampler, seed):
    """Single-ray convenience wrapper. Miss -> zero prediction, no samples."""
    rng = np.random.default_rng(seed)
    near, far, hit = aabb_clip(ray.origin, ray.direction,
                               fields.geometry.bounds_min,
                               fields.geometry.bounds_max)
    c_sem = fields.F.shape[0]
    if not hit[0]:
        return PixelPrediction(np.zeros(3), 0.0, np.zeros(c_sem),
                               np.zeros(0), np.zeros(0), np.zeros(0),
                               np.zeros(0))
    batch = render_rays(fields, ray.origin[None], ray.direction[None],
                        near, far, sampler, rng)
    return PixelPrediction(batch.color.data[0].copy(),
                           float(batch.depth.data[0]),
                           batch.semantic.data[0].copy(),
                           batch.alpha.data[0].copy(),
                           batch.trans.data[0].copy(),
                           batch.weights.data[0].copy(),
                           batch.ts[0].copy())


def render_image(fields, cam, sampler, seed, chunk=4096, background=None):
    """Render a full camera view (no gradients). Returns (rgb, depth, sem).

    Miss rays get the background color (default black) and depth 0.
    """
    from .scenes import pixel_rays
    fields = fields.detach()
    h, w = cam.height, cam.width
    rows, cols = np.divmod(np.arange(h * w), w)
    origins, dirs = pixel_rays(cam, rows, cols)
    near, far, hit = aabb_clip(origins, dirs, fields.geometry.bounds_min,
                               fields.geometry.bounds_max)
    c_sem = fields.F.shape[0]
    rgb = np.zeros((h * w, 3))
    if background is not None:
        rgb[:] = np.asarray(background)
    depth = np.zeros(h * w)
    sem = np.zeros((h * w, c_sem))
    rng = np.random.default_rng(seed)
    hit_idx = np.nonzero(hit)[0]
    for start in range(0, len(hit_idx), chunk):
        sel = hit_idx[start:start + chunk]
        batch = render_rays(fields, origins[sel], dirs[sel], near[sel],
                            far[sel], sampler, rng)
        rgb[sel] = batch.color.data
        depth[sel] = batch.depth.data
        sem[sel] = batch.semantic.data
    return (rgb.reshape(h, w, 3), depth.reshape(h, w),
            sem.reshape(h, w, c_sem))
