"""Randomized gradient certification for the whole differentiable stack.

Three composite paths ride on top of the per-primitive checks: a full
masked-encoder forward, the voxel-query -> deformable-attention volume
build, and ray rendering feeding every loss term. Each path is checked
against the finite-difference oracle on freshly drawn instances; the CLI
``gradcheck`` subcommand and the acceptance tests both run this module.
"""
from __future__ import annotations

import time

import numpy as np

from .diffcore import ops
from .diffcore.gradcheck import gradient_check, primitive_suite
from .diffcore.tensor import ParamStore, Tensor
from .encoder import Encoder, VitConfig
from .losses import (LossToggles, LossWeights, classify_samples,
                     compute_losses, eikonal_loss, free_space_loss,
                     near_surface_sdf_loss)
from .renderer import RenderFields, SamplerConfig, aabb_clip, render_rays, sh_dim
from .scenes import CameraParams, look_at
from .volume import DeformAttnConfig, VolumeBuilder, make_grid

PRIMITIVE_RTOL = 1e-4
COMPOSITE_RTOL = 1e-3


def _encode_view_case(rng):
    """Patchify -> masked ViT -> readout fusion -> convolutional upsample."""
    cfg = VitConfig(height=8, width=8, patch=4, embed=8, depth=1, heads=2,
                    mask_ratio=0.5)
    enc = Encoder(ParamStore(np.float64), cfg,
                  np.random.default_rng(rng.integers(1 << 31)))
    img = rng.uniform(0.0, 1.0, (3, 8, 8))
    mask_seed = int(rng.integers(1 << 31))
    w_map = rng.standard_normal((cfg.c_feature, 8, 8))
    w_cls = rng.standard_normal(cfg.embed)
    names = list(enc.params)
    x0 = [enc.params[n].data.copy() for n in names]

    def f(*xs):
        for name, x in zip(names, xs):
            enc.params[name] = x
        out = enc.encode(img, seed=mask_seed)
        return ops.add(
            ops.reduce_sum(ops.mul(out.feature_map, Tensor(w_map))),
            ops.reduce_sum(ops.mul(out.cls_token, Tensor(w_cls))))

    return "encode_view", f, x0


def _ring_cameras(n, width=16, height=16, radius=4.0):
    cams = []
    for k in range(n):
        az = 2 * np.pi * k / n
        eye = radius * np.array([np.sin(az), 0.0, -np.cos(az)])
        rot, t = look_at(eye, np.zeros(3))
        cams.append(CameraParams(0.75 * width, 0.75 * width, width / 2.0,
                                 height / 2.0, height, width, rot, t))
    return cams


def _build_volume_case(rng):
    """Voxel projection -> deformable attention -> residual 3d conv."""
    grid = make_grid((-1, -1, -1), (1, 1, 1), 3, 3, 2)
    builder = VolumeBuilder(ParamStore(np.float64), grid.shape, 3, 4, 2,
                            np.random.default_rng(rng.integers(1 << 31)),
                            DeformAttnConfig(points=2))
    cams = _ring_cameras(2)
    fmaps = [rng.standard_normal((4, 16, 16)) for _ in range(2)]
    probe = rng.standard_normal((3,) + grid.shape)
    names = list(builder.params)
    x0 = []
    for n in names:
        base = builder.params[n].data.copy()
        # zero-init heads would hide their own gradient; perturb them
        if n.startswith(("offset", "logit")):
            base = rng.standard_normal(base.shape) * 1e-3
        x0.append(base)

    def f(*xs):
        for name, x in zip(names, xs[:-2]):
            builder.params[name] = x
        vol = builder.build([xs[-2], xs[-1]], cams, grid)
        return ops.reduce_sum(ops.mul(vol.features, Tensor(probe)))

    return "build_volume", f, x0 + fmaps


def _render_loss_cases(rng):
    """Ray rendering plus each loss term, w.r.t. the raw field grids."""
    from .renderer import GridGeometry

    geo = GridGeometry((-1, -1, -1), (1, 1, 1), (3, 3, 3))
    origins = np.array([[0.05, 0.0, -3.0], [0.2, -0.1, -3.0]])
    dirs = np.tile(np.array([[0.0, 0.0, 1.0]]), (2, 1))
    near, far, _ = aabb_clip(origins, dirs, geo.bounds_min, geo.bounds_max)
    render_seed = int(rng.integers(1 << 31))
    gt_c = rng.uniform(0.0, 1.0, (2, 3))
    gt_d = rng.uniform(2.8, 3.2, 2)
    gt_s = rng.standard_normal((2, 2))
    w = LossWeights()

    def rays(s, k, fch, log_s):
        fields = RenderFields(s, k, fch, log_s, geo, l_max=0)
        return render_rays(fields, origins, dirs, near, far,
                           SamplerConfig(8, 0),
                           np.random.default_rng(render_seed))

    def term_fn(term):
        def f(s, k, fch, log_s):
            batch = rays(s, k, fch, log_s)
            if term == "render_pixel":
                pc = Tensor(rng_probe[0])
                pd = Tensor(rng_probe[1])
                ps = Tensor(rng_probe[2])
                return ops.add(
                    ops.add(ops.reduce_sum(ops.mul(batch.color, pc)),
                            ops.reduce_sum(ops.mul(batch.depth, pd))),
                    ops.reduce_sum(ops.mul(batch.semantic, ps)))
            if term == "total":
                total, _ = compute_losses(batch, gt_c, gt_d, gt_s, w)
                return total
            if term == "color":
                return ops.reduce_mean(ops.absolute(
                    ops.sub(batch.color, Tensor(gt_c))))
            if term == "depth":
                return ops.reduce_mean(ops.absolute(
                    ops.sub(batch.depth, Tensor(gt_d))))
            if term == "semantic":
                return ops.reduce_mean(ops.absolute(
                    ops.sub(batch.semantic, Tensor(gt_s))))
            if term == "eikonal":
                return eikonal_loss(batch.grad_norm)
            near_m, free_m = classify_samples(batch.ts, gt_d, w.near_t)
            b = gt_d[:, None] - batch.ts
            if term == "near_sdf":
                return near_surface_sdf_loss(batch.sdf, b, near_m)
            if term == "free_space":
                return free_space_loss(batch.sdf, b, free_m, w.free_alpha)
            raise AssertionError(term)
        return f

    rng_probe = (rng.standard_normal((2, 3)), rng.standard_normal(2),
                 rng.standard_normal((2, 2)))
    xs = [rng.standard_normal(geo.shape) * 0.5,
          rng.standard_normal((sh_dim(0),) + geo.shape),
          rng.standard_normal((2,) + geo.shape),
          np.array(np.log(8.0))]
    cases = []
    for term in ("render_pixel", "total", "color", "depth", "semantic",
                 "eikonal", "near_sdf", "free_space"):
        name = term if term == "render_pixel" else f"loss_{term}"
        cases.append((name, term_fn(term), [x.copy() for x in xs]))
    return cases


def composite_cases(rng):
    cases = [_encode_view_case(rng), _build_volume_case(rng)]
    cases.extend(_render_loss_cases(rng))
    return cases


def _keep_worst(worst, rep):
    prev = worst.get(rep.op_name)
    if prev is None or (prev.passed and
                        (not rep.passed
                         or rep.max_rel_error > prev.max_rel_error)):
        worst[rep.op_name] = rep


def composite_suite(instances=10, seed=20240902, rtol=COMPOSITE_RTOL,
                    atol=1e-7):
    """Run every composite path ``instances`` times; worst report each."""
    worst = {}
    for i in range(instances):
        rng = np.random.default_rng(seed + i)
        for name, f, xs in composite_cases(rng):
            _keep_worst(worst, gradient_check(name, f, xs,
                                              rtol=rtol, atol=atol))
    return list(worst.values())


def full_suite(instances=10, seed=20240901):
    """Primitive + composite certification. Returns (reports, seconds)."""
    t0 = time.perf_counter()
    reports = primitive_suite(instances=instances, seed=seed,
                              rtol=PRIMITIVE_RTOL)
    reports += composite_suite(instances=instances, seed=seed + 1)
    return reports, time.perf_counter() - t0
