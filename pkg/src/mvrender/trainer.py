"""Training loop: AdamW + OneCycle + EMA over the full pipeline.

Randomness is counter-based: every consumer derives a fresh generator from
(seed, step, role), so training state never includes a mutable RNG and a
resumed run replays the exact byte-for-byte trajectory of an uninterrupted
one.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from .diffcore import ParamStore
from .encoder import Encoder
from .losses import compute_losses
from .renderer import FieldDecoder, aabb_clip, render_rays
from .scenes import pixel_rays
from .volume import VolumeBuilder, make_grid
from . import config as cfgmod

CSV_HEADER = "step,lr,color,depth,semantic,eikonal,sdf_near,free,total,ms"

# roles for counter-based RNG derivation
ROLE_INIT, ROLE_SCENE, ROLE_MASK, ROLE_PIXELS, ROLE_RENDER = range(5)


class TrainError(RuntimeError):
    pass


def rng_for(seed, step, role):
    return np.random.default_rng(np.random.SeedSequence((seed, step, role)))


def onecycle_lr(step, total, max_lr, pct_start=0.05, div=100.0,
                final_div=1000.0):
    """Two-phase cosine schedule: max_lr/div -> max_lr -> max_lr/div/final_div.

    Defined on step in [0, total]; the warm-up peak sits at pct_start*total.
    """
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    initial = max_lr / div
    final = initial / final_div
    warm = pct_start * total
    if warm > 0 and step <= warm:
        x = step / warm
        return initial + (max_lr - initial) * (1.0 - math.cos(math.pi * x)) / 2.0
    x = (step - warm) / (total - warm)
    return final + (max_lr - final) * (1.0 + math.cos(math.pi * x)) / 2.0


class AdamW:
    """Decoupled weight decay; bias-corrected moments; in-place updates."""

    def __init__(self, store, weight_decay=0.04, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.store = store
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.store.items():
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainError(f"non-finite gradient in {name}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name].copy()
            out[f"opt.v.{name}"] = self.v[name].copy()
        return out

    def load_state(self, arrays, t):
        for name in self.m:
            self.m[name][...] = arrays[f"opt.m.{name}"]
            self.v[name][...] = arrays[f"opt.v.{name}"]
        self.t = int(t)


class Ema:
    """Shadow copy e <- decay*e + (1-decay)*p after every step.

    Implemented as e += (1-decay)*(p-e): algebraically identical, and the
    fixed point e == p is then bit-exact.
    """

    def __init__(self, store, decay=0.999):
        self.decay = decay
        self.shadow = {n: p.data.copy() for n, p in store.items()}

    def update(self, store):
        d = self.decay
        for name, p in store.items():
            e = self.shadow[name]
            e += (1.0 - d) * (p.data - e)

    def state_arrays(self):
        return {f"ema.{n}": a.copy() for n, a in self.shadow.items()}

    def load_state(self, arrays):
        for name in self.shadow:
            self.shadow[name][...] = arrays[f"ema.{name}"]


# ---------------------------------------------------------------------------
# checkpoint format: magic "SPAC", u32 version, u64 header length, UTF-8
# JSON header (meta + tensor table), then raw little-endian tensor data
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SPAC"
CKPT_VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    version: int
    meta: dict
    tensors: dict


def _le_dtype(arr):
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" \
        else arr.dtype
    return arr.astype(dt, copy=False), dt.str


def save_checkpoint(path, tensors, meta):
    """Write named arrays + JSON-serializable meta. Deterministic bytes."""
    names = sorted(tensors)
    table = {}
    blobs = []
    offset = 0
    for name in names:
        # np.asarray keeps 0-d shapes; ascontiguousarray would promote to (1,)
        arr, dtype_str = _le_dtype(np.asarray(tensors[name], order="C"))
        raw = arr.tobytes(order="C")
        table[name] = {"dtype": dtype_str, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": table},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise CheckpointError("truncated checkpoint preamble")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        table = header["tensors"]
        meta = header["meta"]
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"corrupt header: {e}") from e
    base = 16 + hlen
    tensors = {}
    for name, spec in table.items():
        start = base + spec["offset"]
        end = start + spec["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"truncated tensor data for {name}")
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(spec["dtype"]))
        tensors[name] = arr.reshape(spec["shape"]).copy()
    return Checkpoint(version, meta, tensors)


# ---------------------------------------------------------------------------
# model assembly and the optimization step
# ---------------------------------------------------------------------------

class PretrainModel:
    """Encoder -> volume builder -> field decoder over one ParamStore."""

    def __init__(self, cfg, dtype=np.float32):
        self.cfg = cfg
        self.store = ParamStore(dtype=dtype)
        rng = rng_for(cfg.seed, 0, ROLE_INIT)
        vit = cfgmod.vit_config(cfg)
        self.encoder = Encoder(self.store, vit, rng)
        self.builder = VolumeBuilder(self.store,
                                     cfgmod.volume_resolution(cfg),
                                     cfg.c_volume, vit.c_feature,
                                     cfg.n_views, rng,
                                     cfgmod.attn_config(cfg))
        self.decoder = FieldDecoder(self.store, c_in=cfg.c_volume,
                                    l_max=cfg.l_max,
                                    c_semantic=cfg.c_semantic, rng=rng)

    def scene_grid(self, sample):
        return make_grid(sample.bounds_min, sample.bounds_max,
                         *cfgmod.volume_resolution(self.cfg))

    def forward_fields(self, sample, mask_seeds):
        """Encode every view, fuse into the volume, decode render fields."""
        dt = self.store.dtype
        maps = []
        for view, seed in zip(sample.views, mask_seeds):
            img = np.ascontiguousarray(view.rgb.transpose(2, 0, 1)).astype(dt)
            maps.append(self.encoder.encode(img, seed=seed).feature_map)
        cams = [v.camera for v in sample.views]
        grid = self.scene_grid(sample)
        vol = self.builder.build(maps, cams, grid)
        return self.decoder.forward(vol.features, grid), grid


def sample_pixel_batch(sample, teacher, grid, pixels_per_view, rng):
    """Draw K supervised pixels per view; returns ray + target arrays with
    rays that miss the scene bounds dropped."""
    origins, dirs, gt_c, gt_d, gt_s = [], [], [], [], []
    for view in sample.views:
        h, w = view.depth.shape
        idx = rng.choice(h * w, size=min(pixels_per_view, h * w),
                         replace=False)
        rows, cols = np.divmod(idx, w)
        o, d = pixel_rays(view.camera, rows, cols)
        origins.append(o)
        dirs.append(d)
        gt_c.append(view.rgb[rows, cols])
        gt_d.append(view.depth[rows, cols])
        gt_s.append(teacher.matrix[view.semantic[rows, cols]])
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    gt_c = np.concatenate(gt_c)
    gt_d = np.concatenate(gt_d).astype(np.float64)
    gt_s = np.concatenate(gt_s)
    near, far, hit = aabb_clip(origins, dirs, grid.bounds_min,
                               grid.bounds_max)
    return (origins[hit], dirs[hit], near[hit], far[hit],
            gt_c[hit], gt_d[hit], gt_s[hit])


def train_step(model, optimizer, ema, sample, teacher, cfg, step):
    """One optimization step; returns (LossBreakdown, lr)."""
    mask_seeds = [int(s) for s in
                  rng_for(cfg.seed, step, ROLE_MASK)
                  .integers(0, 2 ** 31 - 1, size=len(sample.views))]
    fields, grid = model.forward_fields(sample, mask_seeds)
    origins, dirs, near, far, gt_c, gt_d, gt_s = sample_pixel_batch(
        sample, teacher, grid, cfg.pixels_per_view,
        rng_for(cfg.seed, step, ROLE_PIXELS))
    if origins.shape[0] == 0:
        raise TrainError("no supervised ray intersects the scene bounds")
    batch = render_rays(fields, origins, dirs, near, far,
                        cfgmod.sampler_config(cfg),
                        rng_for(cfg.seed, step, ROLE_RENDER))
    total, bd = compute_losses(batch, gt_c, gt_d, gt_s,
                               cfgmod.loss_weights(cfg),
                               cfgmod.loss_toggles(cfg))
    for term in ("color", "depth", "semantic", "eikonal", "sdf_near",
                 "free"):
        if not np.isfinite(getattr(bd, term)):
            raise TrainError(f"non-finite loss term: {term}")
    lr = onecycle_lr(step, cfg.steps, cfg.lr, cfg.pct_start, cfg.lr_div,
                     cfg.lr_final_div)
    total.backward()
    optimizer.step(lr)
    model.store.zero_grads()
    ema.update(model.store)
    return bd, lr


@dataclass
class FitResult:
    checkpoint_path: str
    metrics_path: str
    rows: list


def _model_states(model, optimizer, ema):
    tensors = {f"param.{n}": p.data.copy() for n, p in model.store.items()}
    tensors.update(optimizer.state_arrays())
    tensors.update(ema.state_arrays())
    return tensors


def _restore(model, optimizer, ema, ck):
    for name, p in model.store.items():
        key = f"param.{name}"
        if key not in ck.tensors:
            raise CheckpointError(f"checkpoint is missing {key}")
        if ck.tensors[key].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {key}")
        p.data[...] = ck.tensors[key]
    optimizer.load_state(ck.tensors, ck.meta["opt_t"])
    ema.load_state(ck.tensors)


def write_checkpoint(path, model, optimizer, ema, cfg, step):
    meta = {"step": step, "opt_t": optimizer.t, "seed": cfg.seed,
            "config": cfgmod.config_dict(cfg)}
    save_checkpoint(path, _model_states(model, optimizer, ema), meta)


def model_from_checkpoint(path, use_ema=True):
    """Rebuild a PretrainModel from a checkpoint file.

    Evaluation consumers read the EMA shadow weights by default; pass
    use_ema=False for the raw parameters. Returns (model, config).
    """
    ck = load_checkpoint(path)
    cfg = cfgmod.resolve_config(ck.meta["config"])
    model = PretrainModel(cfg)
    prefix = "ema." if use_ema else "param."
    for name, p in model.store.items():
        key = prefix + name
        if key not in ck.tensors:
            raise CheckpointError(f"checkpoint is missing {key}")
        if ck.tensors[key].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {key}")
        p.data[...] = ck.tensors[key].astype(p.data.dtype)
    return model, cfg


def fit(samples, teacher, cfg, out_dir, resume=None, log=None):
    """Run cfg.steps optimization steps over the sample list.

    Emits metrics.csv (one row per executed step) and checkpoint.bin in
    out_dir; `resume` restores a previous checkpoint and continues from
    its recorded step, reproducing the uninterrupted trajectory exactly.
    """
    import os
    if not samples:
        raise TrainError("fit needs at least one scene sample")
    for s in samples:
        if len(s.views) != cfg.n_views:
            raise TrainError(f"{s.scene_id}: {len(s.views)} views, "
                             f"config expects {cfg.n_views}")
    if teacher.matrix.shape != (cfg.num_classes, cfg.c_semantic):
        raise TrainError(
            f"semantic teacher shape {teacher.matrix.shape} does not match "
            f"config ({cfg.num_classes}, {cfg.c_semantic})")
    os.makedirs(out_dir, exist_ok=True)
    model = PretrainModel(cfg)
    optimizer = AdamW(model.store, cfg.weight_decay, cfg.adam_beta1,
                      cfg.adam_beta2, cfg.adam_eps)
    ema = Ema(model.store, cfg.ema_decay)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.meta["config"] != cfgmod.config_dict(cfg):
            raise CheckpointError("checkpoint config does not match the "
                                  "requested run configuration")
        _restore(model, optimizer, ema, ck)
        start = int(ck.meta["step"])

    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    rows = []
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for step in range(start, cfg.steps):
            pick = int(rng_for(cfg.seed, step, ROLE_SCENE)
                       .integers(len(samples)))
            t0 = time.perf_counter()
            bd, lr = train_step(model, optimizer, ema, samples[pick],
                                teacher, cfg, step)
            ms = (time.perf_counter() - t0) * 1e3
            row = (f"{step},{lr:.10e},{bd.color:.8e},{bd.depth:.8e},"
                   f"{bd.semantic:.8e},{bd.eikonal:.8e},{bd.sdf_near:.8e},"
                   f"{bd.free:.8e},{bd.total:.8e},{ms:.1f}")
            fh.write(row + "\n")
            fh.flush()
            rows.append(row)
            if log is not None:
                log(step, bd, lr, ms)
            if (cfg.checkpoint_every
                    and (step + 1) % cfg.checkpoint_every == 0
                    and step + 1 < cfg.steps):
                write_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{step + 1:06d}.bin"),
                    model, optimizer, ema, cfg, step + 1)
    write_checkpoint(ckpt_path, model, optimizer, ema, cfg, cfg.steps)
    return FitResult(ckpt_path, metrics_path, rows)
