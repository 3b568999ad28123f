"""Camera-pose probe over a frozen encoder, plus feature-map PCA views.

The probe regresses the relative pose between two views of a scene from
the pair of class tokens the encoder produces in no-mask mode. Encoder
weights are read once to build a feature matrix and never receive
gradients; only the small BatchNorm+MLP head trains.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .diffcore import ops
from .diffcore.tensor import ParamStore, Tensor
from .scenes import _write_ppm
from .trainer import AdamW, onecycle_lr


# ---------------------------------------------------------------------------
# relative pose and metrics


def rotation_to_quaternion(rot):
    """(3,3) rotation -> unit quaternion (w, x, y, z) with w >= 0."""
    m = np.asarray(rot, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"rotation must be (3,3), got {m.shape}")
    t = np.trace(m)
    # Shepperd's branching: divide by the largest diagonal combination.
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quat_to_rotation(q):
    """Unit quaternion (w, x, y, z) -> (3,3) rotation matrix."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion has no rotation")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def relative_pose(cam_a, cam_b):
    """Pose of camera B expressed in camera A's frame.

    Returns (translation (3,), quaternion (4,) with w >= 0); as a rigid
    transform it maps B-camera coordinates into A-camera coordinates.
    """
    r = cam_a.rotation @ cam_b.rotation.T
    t = cam_a.rotation @ (cam_b.center() - cam_a.center())
    return t, rotation_to_quaternion(r)


def quat_geodesic(q1, q2):
    """Geodesic angle between two rotations, theta = 2*acos(|q1.q2|)."""
    a = np.asarray(q1, dtype=np.float64)
    b = np.asarray(q2, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ValueError("zero-norm quaternion in geodesic distance")
    dot = abs(float(np.dot(a / na, b / nb)))
    return 2.0 * math.acos(min(dot, 1.0))


def translation_error(t1, t2):
    """Euclidean distance between two translation vectors."""
    d = np.asarray(t1, dtype=np.float64) - np.asarray(t2, dtype=np.float64)
    return float(np.sqrt(np.sum(d * d)))


# ---------------------------------------------------------------------------
# pose dataset


@dataclass(frozen=True)
class PoseSample:
    """Image pair from one scene plus its ground-truth relative pose."""
    scene_id: str
    image_a: np.ndarray      # (H,W,3) float32
    image_b: np.ndarray
    translation: np.ndarray  # (3,)
    quaternion: np.ndarray   # (4,) unit, w >= 0

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("quaternion must be unit-norm (4,)")
        if np.asarray(self.translation).shape != (3,):
            raise ValueError("translation must be (3,)")


def build_pose_dataset(samples, n_pairs, seed):
    """Draw view pairs from multi-view samples with exact pose targets."""
    if not samples:
        raise ValueError("no samples to draw pose pairs from")
    for s in samples:
        if len(s.views) < 2:
            raise ValueError(f"{s.scene_id}: need at least two views per scene")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        s = samples[int(rng.integers(len(samples)))]
        i, j = rng.choice(len(s.views), size=2, replace=False)
        t, q = relative_pose(s.views[i].camera, s.views[j].camera)
        pairs.append(PoseSample(s.scene_id, s.views[i].rgb, s.views[j].rgb,
                                t, q))
    return pairs


# ---------------------------------------------------------------------------
# probe network


@dataclass(frozen=True)
class ProbeConfig:
    hidden: tuple = (512, 256, 128)
    out_dim: int = 7
    epochs: int = 300
    lr: float = 3e-3
    pct_start: float = 0.1
    batch_size: int = 32
    weight_decay: float = 0.01
    bn_momentum: float = 0.1
    # encoders trained for rendering push a large constant direction into
    # the class token; the informative cross-image variance that survives
    # layer norm can sit well below 1e-5, so the eps floor must be tiny or
    # batch norm refuses to rescale it back up.
    bn_eps: float = 1e-8


def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Normalize (B,F) by batch statistics. Returns (out, mu, var)."""
    if x.shape[0] < 2:
        raise ValueError("batch of size 1 has undefined batch variance")
    mu = ops.reduce_mean(x, axis=0)
    xc = ops.sub(x, mu)
    var = ops.reduce_mean(ops.square(xc), axis=0)
    xhat = ops.div(xc, ops.sqrt(ops.add(var, eps)))
    return ops.add(ops.mul(xhat, gamma), beta), mu, var


class Probe:
    """BatchNorm + 4-linear/3-ReLU head from 2C class-token pairs to 7."""

    def __init__(self, store, c_token, cfg=None, rng=None, prefix="probe"):
        self.cfg = cfg or ProbeConfig()
        self.c_in = 2 * int(c_token)
        rng = rng or np.random.default_rng(0)
        p = {}
        p["bn_gamma"] = store.add(f"{prefix}.bn_gamma", np.ones(self.c_in))
        p["bn_beta"] = store.add(f"{prefix}.bn_beta", np.zeros(self.c_in))
        dims = (self.c_in,) + tuple(self.cfg.hidden) + (self.cfg.out_dim,)
        self.n_layers = len(dims) - 1
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.normal(0.0, math.sqrt(2.0 / d_in), size=(d_in, d_out))
            p[f"w{i}"] = store.add(f"{prefix}.w{i}", w)
            p[f"b{i}"] = store.add(f"{prefix}.b{i}", np.zeros(d_out))
        self.params = p
        self.store = store
        self.running_mean = np.zeros(self.c_in)
        self.running_var = np.ones(self.c_in)

    def forward(self, x, training):
        """(B, 2C) -> (B, 7) tensor; training mode updates running stats."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.store.dtype))
        if x.ndim != 2 or x.shape[1] != self.c_in:
            raise ValueError(f"expected (B, {self.c_in}), got {x.shape}")
        p = self.params
        if training:
            h, mu, var = batch_norm_train(x, p["bn_gamma"], p["bn_beta"],
                                          eps=self.cfg.bn_eps)
            m = self.cfg.bn_momentum
            n = x.shape[0]
            # running variance keeps the unbiased n/(n-1) estimate
            self.running_mean = (1 - m) * self.running_mean + m * mu.data
            self.running_var = ((1 - m) * self.running_var
                                + m * var.data * n / (n - 1))
        else:
            xhat = ops.div(ops.sub(x, self.running_mean),
                           np.sqrt(self.running_var + self.cfg.bn_eps))
            h = ops.add(ops.mul(xhat, p["bn_gamma"]), p["bn_beta"])
        for i in range(self.n_layers):
            h = ops.linear(h, p[f"w{i}"], p[f"b{i}"])
            if i < self.n_layers - 1:
                h = ops.relu(h)
        return h


def probe_forward(probe, cls_a, cls_b, training=False):
    """Concatenate two class-token batches and run the probe."""
    x = np.concatenate([np.atleast_2d(np.asarray(cls_a, dtype=np.float64)),
                        np.atleast_2d(np.asarray(cls_b, dtype=np.float64))],
                       axis=1)
    return probe.forward(x, training)


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass(frozen=True)
class PoseErrors:
    mean_trans: float
    mean_rot: float
    trans_errors: np.ndarray
    rot_errors: np.ndarray   # nan where the prediction was invalid
    n: int
    n_invalid: int
    seed: int


def pose_errors_from_predictions(pred, targets, seed=0):
    """Score (n,7) predictions against (n,7) targets.

    Zero-norm predicted quaternions cannot be normalized; those samples
    are excluded from the rotation mean and counted as invalid.
    """
    pred = np.asarray(pred, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if pred.shape != targets.shape or pred.ndim != 2 or pred.shape[1] != 7:
        raise ValueError("predictions and targets must both be (n, 7)")
    n = pred.shape[0]
    if n == 0:
        raise ValueError("no samples to score")
    trans = np.empty(n)
    rots = np.full(n, np.nan)
    invalid = 0
    for i in range(n):
        trans[i] = translation_error(pred[i, :3], targets[i, :3])
        try:
            rots[i] = quat_geodesic(pred[i, 3:], targets[i, 3:])
        except ValueError:
            invalid += 1
    valid = ~np.isnan(rots)
    mean_rot = float(np.mean(rots[valid])) if valid.any() else float("nan")
    return PoseErrors(float(np.mean(trans)), mean_rot, trans, rots,
                      n, invalid, seed)


def extract_pair_features(encoder, pairs):
    """(X (n,2C), Y (n,7), scene ids) from no-mask class tokens.

    Repeated image objects are encoded once; the encoder itself is
    treated as read-only.
    """
    cache = {}

    def cls_of(img):
        key = id(img)
        if key not in cache:
            chw = np.asarray(img, dtype=encoder.store.dtype).transpose(2, 0, 1)
            cache[key] = encoder.encode(chw, seed=None).cls_token.data.astype(
                np.float64)
        return cache[key]

    xs, ys, ids = [], [], []
    for p in pairs:
        xs.append(np.concatenate([cls_of(p.image_a), cls_of(p.image_b)]))
        ys.append(np.concatenate([p.translation, p.quaternion]))
        ids.append(p.scene_id)
    return np.stack(xs), np.stack(ys).astype(np.float64), ids


def split_by_scene(scene_ids, seed, train_fraction=0.8):
    """Disjoint train/test index arrays; scenes never straddle the split."""
    unique = sorted(set(scene_ids))
    if len(unique) < 2:
        raise ValueError("need at least two distinct scenes for a held-out split")
    rng = np.random.default_rng(seed)
    order = [unique[i] for i in rng.permutation(len(unique))]
    n_train = max(1, min(len(unique) - 1, int(round(train_fraction * len(unique)))))
    train_scenes = set(order[:n_train])
    idx = np.arange(len(scene_ids))
    mask = np.array([s in train_scenes for s in scene_ids])
    return idx[mask], idx[~mask]


def _minibatches(n, size, rng):
    order = rng.permutation(n)
    batches = [order[c:c + size] for c in range(0, n, size)]
    # a trailing singleton would break batch-norm variance; merge it
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def train_probe_on_features(x, y, scene_ids, cfg=None, seed=0):
    """Fit the probe head on precomputed pair features.

    Returns (PoseErrors on the scene-held-out split, trained Probe).
    """
    cfg = cfg or ProbeConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    train_idx, test_idx = split_by_scene(scene_ids, seed)
    if len(train_idx) < 2:
        raise ValueError("train split too small for batch statistics")
    if len(test_idx) == 0:
        raise ValueError("held-out split is empty")
    store = ParamStore(np.float64)
    rng = np.random.default_rng(seed)
    probe = Probe(store, x.shape[1] // 2, cfg, rng)
    opt = AdamW(store, weight_decay=cfg.weight_decay)
    x_train, y_train = x[train_idx], y[train_idx]
    n_batches = len(_minibatches(len(train_idx), cfg.batch_size,
                                 np.random.default_rng(0)))
    total = cfg.epochs * n_batches
    step = 0
    for _ in range(cfg.epochs):
        for idx in _minibatches(len(train_idx), cfg.batch_size, rng):
            pred = probe.forward(x_train[idx], training=True)
            loss = ops.reduce_mean(ops.square(ops.sub(pred, y_train[idx])))
            loss.backward()
            opt.step(onecycle_lr(step, total, cfg.lr,
                                 pct_start=cfg.pct_start))
            store.zero_grads()
            step += 1
    pred = probe.forward(x[test_idx], training=False).data
    return pose_errors_from_predictions(pred, y[test_idx], seed=seed), probe


def train_probe(pairs, encoder, cfg=None, seed=0):
    """Extract frozen-encoder features from pose pairs and fit the probe."""
    x, y, ids = extract_pair_features(encoder, pairs)
    errors, _ = train_probe_on_features(x, y, ids, cfg=cfg, seed=seed)
    return errors


def write_pose_errors(path, errors):
    payload = {
        "mean_trans": errors.mean_trans,
        "mean_rot": errors.mean_rot,
        "n": errors.n,
        "seed": errors.seed,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def encoder_from_checkpoint(path):
    """EMA encoder weights from a checkpoint. Returns (encoder, config)."""
    from .trainer import model_from_checkpoint

    model, cfg = model_from_checkpoint(path, use_ema=True)
    return model.encoder, cfg


# ---------------------------------------------------------------------------
# feature-map PCA visualization


def joint_pca(rows, k):
    """Mean and top-k principal axes of (n, c) rows, sign-canonicalized."""
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a (n, c) matrix")
    if x.shape[0] < k:
        raise ValueError(f"need at least {k} pixels, got {x.shape[0]}")
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    basis = vt[:k].copy()
    for row in basis:                       # fix the SVD sign ambiguity
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return mean, basis


def feature_pca_map(encoder, images, n_components=3):
    """Project every view's feature map onto shared top-3 axes.

    Returns one (H, W, 3) float image in [0, 1] per view; components and
    the min-max range are fit jointly so colors compare across views.
    """
    if len(images) < 2:
        raise ValueError("need at least two views")
    per_view = []
    for img in images:
        chw = np.asarray(img, dtype=encoder.store.dtype).transpose(2, 0, 1)
        fmap = encoder.encode(chw, seed=None).feature_map.data
        c, h, w = fmap.shape
        per_view.append((fmap.reshape(c, h * w).T.astype(np.float64), h, w))
    rows = np.concatenate([v[0] for v in per_view], axis=0)
    mean, basis = joint_pca(rows, n_components)
    proj = (rows - mean) @ basis.T
    lo = proj.min(axis=0)
    span = proj.max(axis=0) - lo
    span[span < 1e-12] = 1.0                # constant channel -> flat 0
    out = []
    start = 0
    for pixels, h, w in per_view:
        p = (proj[start:start + len(pixels)] - lo) / span
        out.append(p.reshape(h, w, n_components).astype(np.float32))
        start += len(pixels)
    return out


def save_ppm(path, image):
    """Write one float [0,1] (H,W,3) image as a binary PPM."""
    _write_ppm(path, image)
