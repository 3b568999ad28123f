"""Feature-volume construction from multi-view feature maps.

A learnable per-voxel embedding grid is the query set; every voxel center
is projected into each view with the known camera, and deformable attention
reads the view feature maps at predicted offsets around those projections.
A residual 3-D convolution then refines the attended volume.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, ShapeError, ops
from .renderer import GridGeometry

Z_MIN = 1e-4          # minimum camera-frame depth for a valid projection
INVALID_LOGIT = -1e30  # effectively -inf for the slot softmax


def make_grid(bounds_min, bounds_max, x, y, z):
    """Axis-aligned voxel grid; centers at min + (i+0.5)*voxel_size."""
    if min(x, y, z) < 1:
        raise ShapeError(f"grid resolution must be positive, got {(x, y, z)}")
    return GridGeometry(tuple(bounds_min), tuple(bounds_max), (x, y, z))


@dataclass(frozen=True)
class DeformAttnConfig:
    points: int = 4       # sampling points per view
    heads: int = 1
    offset_scale: float = 8.0  # pixels; offsets pass through tanh * scale

    def __post_init__(self):
        if self.points < 1:
            raise ShapeError("deformable attention needs >= 1 point per view")
        if self.heads != 1:
            raise ShapeError("single-head attention only")


@dataclass
class VolumeFeatures:
    features: Tensor   # (C_v, X, Y, Z)
    grid: GridGeometry

    def __post_init__(self):
        if self.features.shape[1:] != self.grid.shape:
            raise ShapeError(f"features {self.features.shape} do not match "
                             f"grid {self.grid.shape}")


def project_voxels(grid, camera):
    """Pinhole projection of every voxel center into one view.

    Returns (uv (N,2) pixel coordinates, valid (N,) bool). A projection is
    valid when the camera-frame depth exceeds Z_MIN and (u, v) lands inside
    the image rectangle.
    """
    centers = grid.voxel_centers().reshape(-1, 3)
    cam_pts = centers @ camera.rotation.T + camera.translation
    z = cam_pts[:, 2]
    safe_z = np.where(np.abs(z) < Z_MIN, Z_MIN, z)
    u = camera.fx * cam_pts[:, 0] / safe_z + camera.cx
    v = camera.fy * cam_pts[:, 1] / safe_z + camera.cy
    valid = ((z > Z_MIN)
             & (u >= 0.0) & (u < camera.width)
             & (v >= 0.0) & (v < camera.height))
    return np.stack([u, v], axis=1), valid


class VolumeBuilder:
    """Learnable query grid + deformable attention + residual 3-D conv.

    Parameter shapes are fixed by (resolution, c_volume, c_feature, n_views)
    at construction; the world-space grid placement is supplied per build
    call because scene bounds vary. `self.params` maps local name -> Tensor
    and is read at call time so tests can substitute entries.
    """

    def __init__(self, store, resolution, c_volume, c_feature, n_views,
                 rng, attn=DeformAttnConfig(), prefix="volume"):
        self.resolution = tuple(int(v) for v in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 1:
            raise ShapeError(f"bad volume resolution {resolution}")
        self.c_volume = c_volume
        self.c_feature = c_feature
        self.n_views = n_views
        self.attn = attn
        self.params = {}
        slots = n_views * attn.points

        def add(name, value):
            p = store.add(f"{prefix}.{name}", value)
            self.params[name] = p
            return p

        add("v_tilde",
            rng.standard_normal((c_volume,) + self.resolution) * 0.02)
        # offset/logit heads start at zero: attention begins as a uniform
        # average of bilinear reads exactly at the projected references
        add("offset_w", np.zeros((c_volume, slots * 2)))
        add("offset_b", np.zeros(slots * 2))
        add("logit_w", np.zeros((c_volume, slots)))
        add("logit_b", np.zeros(slots))
        add("value_w", rng.standard_normal((c_feature, c_volume)) * 0.02)
        add("value_b", np.zeros(c_volume))
        add("out_w", rng.standard_normal((c_volume, c_volume)) * 0.02)
        add("out_b", np.zeros(c_volume))
        add("refine_w", rng.standard_normal(
            (c_volume, c_volume, 3, 3, 3)) * 0.02)
        add("refine_b", np.zeros(c_volume))

    def _p(self, name):
        return self.params[name]

    def deformable_attention(self, queries, feature_maps, refs, valid):
        """queries (Q,C_v); feature_maps: n_views tensors (C_f,H,W);
        refs (n_views,Q,2); valid (n_views,Q). Returns (Q,C_v)."""
        n_views, p = self.n_views, self.attn.points
        if len(feature_maps) != n_views or refs.shape[0] != n_views:
            raise ShapeError(f"expected {n_views} views, got "
                             f"{len(feature_maps)}")
        q_count = queries.shape[0]
        off = ops.mul(ops.tanh(ops.linear(queries, self._p("offset_w"),
                                          self._p("offset_b"))),
                      self.attn.offset_scale)      # (Q, V*P*2)
        logits = ops.linear(queries, self._p("logit_w"),
                            self._p("logit_b"))    # (Q, V*P)

        samples = []
        for vi in range(n_views):
            ref_v = Tensor(np.asarray(refs[vi], dtype=queries.dtype))
            base = vi * p * 2
            coords = ops.concat(
                [ops.add(ref_v, off[:, base + 2 * pi:base + 2 * pi + 2])
                 for pi in range(p)], axis=0)      # all points of one view
            view_samples = ops.bilinear_sample(feature_maps[vi], coords)
            samples.append(ops.reshape(view_samples,
                                       (p, q_count, self.c_feature)))
        stacked = ops.concat(samples, axis=0)      # (V*P, Q, C_f)

        slot_valid = np.repeat(valid, p, axis=0).T  # (Q, V*P)
        masked = ops.where(slot_valid, logits,
                           Tensor(np.asarray(INVALID_LOGIT,
                                             dtype=queries.dtype)))
        weights = ops.softmax(masked, axis=1)       # (Q, V*P)
        # softmax weights sum to one, so the value projection commutes with
        # the average: attend on raw samples, project the pooled result once
        pooled = ops.reshape(
            ops.matmul(ops.reshape(weights, (q_count, 1, n_views * p)),
                       ops.transpose(stacked, (1, 0, 2))),
            (q_count, self.c_feature))
        attended = ops.linear(pooled, self._p("value_w"), self._p("value_b"))
        attended = ops.linear(attended, self._p("out_w"), self._p("out_b"))
        any_valid = slot_valid.any(axis=1)[:, None]
        return ops.where(any_valid, attended, queries)

    def conv3d_refine(self, vol):
        """Residual 3x3x3 convolution; zero weights leave vol unchanged."""
        return ops.add(vol, ops.conv3d(vol, self._p("refine_w"),
                                       self._p("refine_b"), padding=1))

    def build(self, feature_maps, cameras, grid):
        """Full pass: project, attend, refine. Returns VolumeFeatures."""
        if grid.shape != self.resolution:
            raise ShapeError(f"grid {grid.shape} does not match configured "
                             f"resolution {self.resolution}")
        if len(feature_maps) != self.n_views or len(cameras) != self.n_views:
            raise ShapeError(f"builder configured for {self.n_views} views")
        for m in feature_maps:
            if m.shape[0] != self.c_feature:
                raise ShapeError(f"feature map has {m.shape[0]} channels, "
                                 f"expected {self.c_feature}")
        refs = np.empty((self.n_views, grid.n_voxels, 2))
        valid = np.empty((self.n_views, grid.n_voxels), dtype=bool)
        for vi, cam in enumerate(cameras):
            refs[vi], valid[vi] = project_voxels(grid, cam)

        v_tilde = self._p("v_tilde")
        queries = ops.transpose(
            ops.reshape(v_tilde, (self.c_volume, grid.n_voxels)), (1, 0))
        attended = self.deformable_attention(queries, feature_maps,
                                             refs, valid)
        vol = ops.reshape(ops.transpose(attended, (1, 0)),
                          (self.c_volume,) + grid.shape)
        return VolumeFeatures(self.conv3d_refine(vol), grid)
