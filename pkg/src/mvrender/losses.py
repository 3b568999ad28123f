"""Loss stack for the rendering pipeline.

Reconstruction terms (color / depth / semantic) are weighted elementwise-
mean L1 over the supervised pixel batch; geometric regularizers pull the
SDF toward a unit-gradient field that matches observed depth along rays.
Per-sample bookkeeping: b(z) = D - z is the remaining distance to the
observed surface; samples with b <= near_t count as near-surface, the
rest of the valid-depth samples as free space. Samples on rays without
valid depth feed only the Eikonal term.

Disabled terms are never evaluated: they are reported as exactly 0.0 and
contribute no node to the gradient tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, ops


@dataclass(frozen=True)
class LossWeights:
    color: float = 10.0
    depth: float = 1.0
    semantic: float = 1.0
    eikonal: float = 0.01
    sdf: float = 10.0
    free: float = 1.0
    near_t: float = 0.05     # near-surface band threshold on b(z)
    free_alpha: float = 5.0  # exponential barrier sharpness in free space

    def __post_init__(self):
        for name in ("color", "depth", "semantic", "eikonal", "sdf", "free"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class LossToggles:
    color: bool = True
    depth: bool = True
    semantic: bool = True

    def __post_init__(self):
        if not (self.color or self.depth or self.semantic):
            raise ValueError("at least one rendering loss must stay enabled")


@dataclass
class LossBreakdown:
    """Raw (unweighted) term values; total is the weighted recombination."""
    color: float = 0.0
    depth: float = 0.0
    semantic: float = 0.0
    eikonal: float = 0.0
    sdf_near: float = 0.0
    free: float = 0.0
    total: float = 0.0
    no_valid_depth: bool = False


def classify_samples(ts, gt_depth, near_t):
    """Split ray samples by b(z) = D - z. Returns (near, free) masks (Q,N).

    Only rays with valid depth (D > 0) populate either mask; inclusion is
    b <= near_t for near-surface, the remaining valid samples are free
    space (strictly in front of the near band).
    """
    ts = np.asarray(ts)
    depth = np.asarray(gt_depth)
    valid = depth > 0.0
    b = depth[:, None] - ts
    near = valid[:, None] & (b <= near_t)
    free = valid[:, None] & (b > near_t)
    return near, free


def _masked_rows(sdf, mask):
    flat = ops.reshape(sdf, (sdf.size,))
    idx = np.nonzero(np.ravel(mask))[0]
    return ops.gather_rows(flat, idx), idx


def near_surface_sdf_loss(sdf, b, near_mask):
    """Mean |s(z) - b(z)| over near-surface samples; 0.0 when empty."""
    sel, idx = _masked_rows(sdf, near_mask)
    if len(idx) == 0:
        return 0.0
    bv = np.ravel(b)[idx].astype(sel.dtype)
    return ops.reduce_mean(ops.absolute(ops.sub(sel, Tensor(bv))))


def free_space_loss(sdf, b, free_mask, alpha):
    """Mean of max(0, e^{-alpha*s} - 1, s - b) over free samples; 0.0 empty."""
    sel, idx = _masked_rows(sdf, free_mask)
    if len(idx) == 0:
        return 0.0
    bv = np.ravel(b)[idx].astype(sel.dtype)
    barrier = ops.sub(ops.exp(ops.mul(sel, -float(alpha))), 1.0)
    overshoot = ops.sub(sel, Tensor(bv))
    return ops.reduce_mean(ops.maximum(ops.maximum(barrier, overshoot), 0.0))


def eikonal_loss(grad_norm):
    """Mean squared deviation of |grad S| from 1 over every sampled point."""
    return ops.reduce_mean(ops.square(ops.sub(grad_norm, 1.0)))


def total_loss(render, eikonal, sdf_near, free, weights):
    """Recombination: render + w_e*eikonal + w_sdf*sdf + w_free*free."""
    return (render + weights.eikonal * eikonal + weights.sdf * sdf_near
            + weights.free * free)


def compute_losses(batch, gt_color, gt_depth, gt_semantic, weights,
                   toggles=LossToggles()):
    """Full loss over one supervised ray batch.

    batch: RenderBatch; gt_color (Q,3), gt_depth (Q,) with 0 = invalid,
    gt_semantic (Q,C_sem) — all numpy. Returns (total Tensor or 0.0,
    LossBreakdown with raw term values).
    """
    q = batch.ts.shape[0]
    if q == 0:
        raise ValueError("loss needs at least one supervised pixel")
    dtype = batch.color.dtype
    bd = LossBreakdown()
    terms = []

    def contribute(term, weight):
        terms.append(ops.mul(term, float(weight)))

    if toggles.color and weights.color > 0:
        c = ops.reduce_mean(ops.absolute(
            ops.sub(batch.color, Tensor(np.asarray(gt_color, dtype=dtype)))))
        bd.color = c.item()
        contribute(c, weights.color)

    valid = np.asarray(gt_depth) > 0.0
    bd.no_valid_depth = not valid.any()
    if toggles.depth and weights.depth > 0:
        if valid.any():
            sel, idx = _masked_rows(batch.depth, valid)
            target = np.asarray(gt_depth)[idx].astype(dtype)
            d = ops.reduce_mean(ops.absolute(ops.sub(sel, Tensor(target))))
            bd.depth = d.item()
            contribute(d, weights.depth)

    if toggles.semantic and weights.semantic > 0:
        s = ops.reduce_mean(ops.absolute(
            ops.sub(batch.semantic,
                    Tensor(np.asarray(gt_semantic, dtype=dtype)))))
        bd.semantic = s.item()
        contribute(s, weights.semantic)

    if weights.eikonal > 0:
        e = eikonal_loss(batch.grad_norm)
        bd.eikonal = e.item()
        contribute(e, weights.eikonal)

    # SDF band terms are supervision from observed depth, so they follow
    # the depth toggle: with depth off they are never evaluated.
    if toggles.depth and (weights.sdf > 0 or weights.free > 0):
        near_mask, free_mask = classify_samples(batch.ts, gt_depth,
                                                weights.near_t)
        b = np.asarray(gt_depth)[:, None] - batch.ts
        if weights.sdf > 0:
            n = near_surface_sdf_loss(batch.sdf, b, near_mask)
            if not isinstance(n, float):
                bd.sdf_near = n.item()
                contribute(n, weights.sdf)
        if weights.free > 0:
            f = free_space_loss(batch.sdf, b, free_mask, weights.free_alpha)
            if not isinstance(f, float):
                bd.free = f.item()
                contribute(f, weights.free)

    if not terms:
        total = Tensor(np.zeros((), dtype=dtype))
    else:
        total = terms[0]
        for t in terms[1:]:
            total = ops.add(total, t)
    bd.total = float(total.item())
    return total, bd
