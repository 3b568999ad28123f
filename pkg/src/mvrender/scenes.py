"""Procedural multi-view scenes with analytic signed-distance ground truth.

A scene is a union of sphere/box primitives inside an axis-aligned bound.
Ground-truth RGB-D and semantic maps come from a sphere-tracing oracle
over the analytic SDF; nothing here touches the autodiff tape, so these
outputs are independent targets for the learned renderer.

Dataset directory layout: ``manifest.json`` plus, per view, a binary PPM
(P6) for RGB, a binary PGM (P5) for semantic ids, and a raw little-endian
float32 file (``.f32``) for depth. Invalid depth is exactly 0.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

# Fixed directional light (towards the light, unit norm) for Lambert shading.
LIGHT_DIR = np.array([0.3, 0.8, -0.5]) / np.linalg.norm([0.3, 0.8, -0.5])

TRACE_SAFETY = 0.9
TRACE_TOL = 1e-4
TRACE_MAX_STEPS = 256
BOUNDS_PAD_FRACTION = 0.10  # per side, relative to the union half-extent


class DatasetError(ValueError):
    """Malformed dataset directory or manifest."""


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------

@dataclass
class SdfPrimitive:
    kind: str                      # "sphere" or "box"
    center: np.ndarray             # (3,)
    albedo: np.ndarray             # (3,) in [0,1]
    class_id: int                  # 0 is reserved for background
    radius: float = 0.0            # spheres
    half_extents: np.ndarray | None = None  # boxes

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.kind == "sphere":
            if self.radius <= 0:
                raise ValueError("sphere radius must be positive")
        elif self.kind == "box":
            self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
            if np.any(self.half_extents <= 0):
                raise ValueError("box half-extents must be positive")
        else:
            raise ValueError(f"unknown primitive kind: {self.kind}")
        if self.class_id < 1:
            raise ValueError("primitive class id must be >= 1 (0 = background)")

    def sdf(self, points):
        """Signed distance at points (...,3); negative inside."""
        p = np.asarray(points, dtype=np.float64) - self.center
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.radius
        q = np.abs(p) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def aabb(self):
        if self.kind == "sphere":
            h = np.full(3, self.radius)
        else:
            h = self.half_extents
        return self.center - h, self.center + h


@dataclass
class SceneSpec:
    primitives: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    background: np.ndarray         # RGB in [0,1]
    scene_id: str = "scene"

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)
        if not np.all(self.bounds_min < self.bounds_max):
            raise ValueError("scene bounds must satisfy min < max componentwise")


def union_bounds(primitives, pad_fraction=BOUNDS_PAD_FRACTION):
    """Union of primitive AABBs, padded per side by a fraction of the
    union half-extent (so a unit sphere gets bounds [-1.1, 1.1]^3)."""
    lows, highs = zip(*(p.aabb() for p in primitives))
    lo = np.min(np.stack(lows), axis=0)
    hi = np.max(np.stack(highs), axis=0)
    half = (hi - lo) / 2.0
    return lo - pad_fraction * half, hi + pad_fraction * half


def scene_sdf(scene, points):
    """Union SDF: min over primitive distances. points (...,3) -> (...)."""
    dists = np.stack([p.sdf(points) for p in scene.primitives], axis=-1)
    return np.min(dists, axis=-1)


def nearest_class(scene, points):
    """(class ids, albedos) of the closest primitive; ties break by index."""
    dists = np.stack([p.sdf(points) for p in scene.primitives], axis=-1)
    idx = np.argmin(dists, axis=-1)
    class_ids = np.array([p.class_id for p in scene.primitives])[idx]
    albedos = np.stack([p.albedo for p in scene.primitives])[idx]
    return class_ids, albedos


def random_scene(seed, scene_id=None, num_classes=8, max_primitives=4):
    """Procedural scene: 1-4 random primitives with random appearance."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_primitives + 1))
    prims = []
    for _ in range(n):
        center = rng.uniform(-0.8, 0.8, size=3)
        albedo = rng.uniform(0.25, 1.0, size=3)
        class_id = int(rng.integers(1, num_classes))
        if rng.random() < 0.5:
            prims.append(SdfPrimitive("sphere", center, albedo, class_id,
                                      radius=float(rng.uniform(0.25, 0.6))))
        else:
            prims.append(SdfPrimitive("box", center, albedo, class_id,
                                      half_extents=rng.uniform(0.2, 0.5, size=3)))
    lo, hi = union_bounds(prims)
    background = rng.uniform(0.05, 0.35, size=3)
    sid = scene_id if scene_id is not None else f"scene_{seed:08d}"
    return SceneSpec(prims, lo, hi, background, scene_id=sid)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass
class CameraParams:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    rotation: np.ndarray      # (3,3) world-to-camera
    translation: np.ndarray   # (3,) world-to-camera

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")

    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera rotation/translation for +z forward, +y image-down."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-9:
        raise ValueError("degenerate look-at: camera coincides with target")
    z = fwd / norm
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    xn = np.linalg.norm(x)
    if xn < 1e-9:  # looking straight along up: pick another horizontal axis
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        xn = np.linalg.norm(x)
    x = x / xn
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)
    return rot, -rot @ eye


def generate_cameras(scene, n, seed, height=64, width=64, focal=None,
                     radius=None, jitter=0.3):
    """Cameras on a sphere around the bounds center, looking at it.

    Base azimuths are evenly spaced starting at 0 (camera 0 sits at
    (0, 0, -radius) relative to the center); ``jitter`` radians of seeded
    noise is added to azimuth and elevation.
    """
    if n < 1:
        raise ValueError("need at least one camera")
    rng = np.random.default_rng(seed)
    center = (scene.bounds_min + scene.bounds_max) / 2.0
    half = (scene.bounds_max - scene.bounds_min) / 2.0
    if radius is None:
        radius = 2.5 * float(np.linalg.norm(half))
    if focal is None:
        focal = 0.75 * width
    cams = []
    for k in range(n):
        az = 2.0 * np.pi * k / n + rng.uniform(-jitter, jitter)
        el = np.clip(rng.uniform(-jitter, jitter), -1.2, 1.2)
        offset = radius * np.array([np.sin(az) * np.cos(el),
                                    np.sin(el),
                                    -np.cos(az) * np.cos(el)])
        rot, trans = look_at(center + offset, center)
        cams.append(CameraParams(focal, focal, width / 2.0, height / 2.0,
                                 height, width, rot, trans))
    return cams


def pixel_rays(cam, rows, cols):
    """World-space rays through pixel centers. rows/cols (Q,) -> (Q,3) pair.

    Directions are unit-norm, so the ray parameter equals world distance
    and rendered depth is metric.
    """
    u = np.asarray(cols, dtype=np.float64) + 0.5
    v = np.asarray(rows, dtype=np.float64) + 0.5
    d = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy,
                  np.ones_like(u)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    dirs = d @ cam.rotation  # = R^T d per row
    origin = cam.center()
    return np.broadcast_to(origin, dirs.shape).copy(), dirs


def ray_aabb(origins, dirs, bounds_min, bounds_max):
    """Entry/exit parameters of rays against an AABB: (t_enter, t_exit).

    A ray misses when t_exit <= max(t_enter, 0).
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bounds_min - origins) * inv
        t1 = (bounds_max - origins) * inv
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    return lo.max(axis=-1), hi.min(axis=-1)


# ---------------------------------------------------------------------------
# sphere-tracing oracle
# ---------------------------------------------------------------------------

def _sdf_normals(scene, points, eps=1e-5):
    grad = np.empty_like(points)
    for a in range(3):
        step = np.zeros(3)
        step[a] = eps
        grad[:, a] = scene_sdf(scene, points + step) - scene_sdf(scene, points - step)
    norms = np.linalg.norm(grad, axis=-1, keepdims=True)
    return grad / np.maximum(norms, 1e-12)


def trace_rays(scene, origins, dirs):
    """Sphere-trace rays against the scene. Returns (hit mask, depth).

    Misses (including bounds misses and step-budget exhaustion) get depth 0.
    """
    q = origins.shape[0]
    t_enter, t_exit = ray_aabb(origins, dirs, scene.bounds_min, scene.bounds_max)
    t = np.maximum(t_enter, 0.0) + 1e-6
    active = t_exit > np.maximum(t_enter, 0.0)
    hit = np.zeros(q, dtype=bool)
    for _ in range(TRACE_MAX_STEPS):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        p = origins[idx] + t[idx, None] * dirs[idx]
        s = scene_sdf(scene, p)
        newly_hit = s < TRACE_TOL
        hit[idx[newly_hit]] = True
        active[idx[newly_hit]] = False
        adv = idx[~newly_hit]
        t[adv] += TRACE_SAFETY * s[~newly_hit]
        escaped = t[adv] > t_exit[adv]
        active[adv[escaped]] = False
    depth = np.where(hit, t, 0.0)
    return hit, depth


def raymarch_render(scene, cam):
    """Oracle render: (rgb (H,W,3) float64, depth (H,W) float32, sem (H,W) u8)."""
    h, w = cam.height, cam.width
    rows, cols = np.divmod(np.arange(h * w), w)
    origins, dirs = pixel_rays(cam, rows, cols)
    hit, depth = trace_rays(scene, origins, dirs)

    rgb = np.broadcast_to(scene.background, (h * w, 3)).copy()
    sem = np.zeros(h * w, dtype=np.uint8)
    if hit.any():
        pts = origins[hit] + depth[hit, None] * dirs[hit]
        class_ids, albedos = nearest_class(scene, pts)
        normals = _sdf_normals(scene, pts)
        lambert = np.maximum(normals @ LIGHT_DIR, 0.0)
        rgb[hit] = albedos * lambert[:, None]
        sem[hit] = class_ids
    return (np.clip(rgb, 0.0, 1.0).reshape(h, w, 3),
            depth.astype(np.float32).reshape(h, w),
            sem.reshape(h, w))


# ---------------------------------------------------------------------------
# semantic teacher
# ---------------------------------------------------------------------------

@dataclass
class SemanticTeacher:
    matrix: np.ndarray   # (num_classes, c_semantic), unit-norm rows
    seed: int

    @property
    def num_classes(self):
        return self.matrix.shape[0]


def make_semantic_teacher(num_classes, c_semantic, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((num_classes, c_semantic))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return SemanticTeacher(m.astype(np.float32), seed)


def semantic_embed(teacher, class_map):
    """Per-pixel teacher features: (H,W) ids -> (C_semantic, H, W)."""
    ids = np.asarray(class_map)
    if ids.max(initial=0) >= teacher.num_classes:
        raise DatasetError(f"class id {int(ids.max())} out of range "
                           f"(num_classes={teacher.num_classes})")
    return np.ascontiguousarray(teacher.matrix[ids].transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# samples and dataset IO
# ---------------------------------------------------------------------------

@dataclass
class View:
    rgb: np.ndarray        # (H,W,3) float32 in [0,1]
    depth: np.ndarray      # (H,W) float32, 0 = invalid
    semantic: np.ndarray   # (H,W) uint8
    camera: CameraParams


@dataclass
class MultiViewSample:
    scene_id: str
    views: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    def __post_init__(self):
        if not 1 <= len(self.views) <= 8:
            raise ValueError("a sample carries between 1 and 8 views")


def render_sample(scene, cameras):
    views = []
    for cam in cameras:
        rgb, depth, sem = raymarch_render(scene, cam)
        views.append(View(rgb.astype(np.float32), depth, sem, cam))
    return MultiViewSample(scene.scene_id, views,
                           scene.bounds_min.copy(), scene.bounds_max.copy())


def generate_dataset(n_scenes, seed, n_views=8, height=64, width=64,
                     num_classes=8, c_semantic=16):
    """n_scenes procedural samples plus the shared semantic teacher."""
    samples = []
    for i in range(n_scenes):
        scene = random_scene(seed + 1000 * i, scene_id=f"scene_{i:04d}",
                             num_classes=num_classes)
        cams = generate_cameras(scene, n_views, seed + 1000 * i + 7,
                                height=height, width=width)
        samples.append(render_sample(scene, cams))
    teacher = make_semantic_teacher(num_classes, c_semantic, seed)
    return samples, teacher


def _write_ppm(path, rgb):
    u8 = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255)
    u8 = u8.astype(np.uint8)
    h, w, _ = u8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())


def _read_ppm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise DatasetError(f"{path}: not a binary PPM")
        w, h = map(int, f.readline().split())
        maxval = int(f.readline())
        if maxval != 255:
            raise DatasetError(f"{path}: unsupported maxval {maxval}")
        buf = f.read(w * h * 3)
    if len(buf) != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def _write_pgm(path, ids):
    ids = np.asarray(ids, dtype=np.uint8)
    h, w = ids.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(ids.tobytes())


def _read_pgm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise DatasetError(f"{path}: not a binary PGM")
        w, h = map(int, f.readline().split())
        int(f.readline())
        buf = f.read(w * h)
    if len(buf) != w * h:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(buf, dtype=np.uint8).reshape(h, w).copy()


def _write_f32(path, depth):
    np.asarray(depth, dtype="<f4").tofile(path)


def _read_f32(path, h, w):
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != h * w:
        raise DatasetError(f"{path}: expected {h * w} float32 values, "
                           f"found {arr.size}")
    return arr.reshape(h, w)


def write_dataset(samples, teacher, directory):
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format_version": 1,
        "class_count": int(teacher.num_classes),
        "c_semantic": int(teacher.matrix.shape[1]),
        "teacher_seed": int(teacher.seed),
        "scenes": [],
    }
    for sample in samples:
        sdir = os.path.join(directory, sample.scene_id)
        os.makedirs(sdir, exist_ok=True)
        entry = {
            "id": sample.scene_id,
            "bounds_min": sample.bounds_min.tolist(),
            "bounds_max": sample.bounds_max.tolist(),
            "views": [],
        }
        for i, view in enumerate(sample.views):
            base = f"{sample.scene_id}/view_{i:02d}"
            _write_ppm(os.path.join(directory, base + ".ppm"), view.rgb)
            _write_pgm(os.path.join(directory, base + ".pgm"), view.semantic)
            _write_f32(os.path.join(directory, base + ".f32"), view.depth)
            cam = view.camera
            entry["views"].append({
                "rgb": base + ".ppm",
                "semantic": base + ".pgm",
                "depth": base + ".f32",
                "height": cam.height,
                "width": cam.width,
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "world_to_camera": cam.world_to_camera_matrix().ravel().tolist(),
            })
        manifest["scenes"].append(entry)
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def read_dataset(directory):
    """Load a dataset directory -> (samples, teacher)."""
    mpath = os.path.join(directory, "manifest.json")
    if not os.path.isfile(mpath):
        raise DatasetError(f"missing manifest: {mpath}")
    with open(mpath) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{mpath}: invalid JSON ({e})") from e
    teacher = make_semantic_teacher(manifest["class_count"],
                                    manifest["c_semantic"],
                                    manifest["teacher_seed"])
    samples = []
    for entry in manifest["scenes"]:
        views = []
        for v in entry["views"]:
            for key in ("rgb", "semantic", "depth"):
                path = os.path.join(directory, v[key])
                if not os.path.isfile(path):
                    raise DatasetError(f"missing view file: {path}")
            h, w = v["height"], v["width"]
            m = np.array(v["world_to_camera"], dtype=np.float64).reshape(4, 4)
            cam = CameraParams(v["fx"], v["fy"], v["cx"], v["cy"], h, w,
                               m[:3, :3], m[:3, 3])
            rgb = _read_ppm(os.path.join(directory, v["rgb"]))
            if rgb.shape != (h, w, 3):
                raise DatasetError(f"{v['rgb']}: shape {rgb.shape} does not "
                                   f"match manifest ({h}, {w}, 3)")
            sem = _read_pgm(os.path.join(directory, v["semantic"]))
            depth = _read_f32(os.path.join(directory, v["depth"]), h, w)
            views.append(View(rgb, depth, sem, cam))
        samples.append(MultiViewSample(entry["id"], views,
                                       np.array(entry["bounds_min"]),
                                       np.array(entry["bounds_max"])))
    return samples, teacher
