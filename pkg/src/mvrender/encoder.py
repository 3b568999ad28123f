"""Masked ViT image encoder producing full-resolution feature maps.

Pipeline per view: patchify -> drop a random subset of patches -> pre-norm
transformer over the visible tokens plus a learned class token -> re-insert
learned mask tokens at the dropped positions -> fuse every patch token with
the class token -> fold the token grid back to 2-D -> two conv/GELU/pixel-
shuffle stages up to input resolution.

The output feature map has C_f = C / P channels: each pixel-shuffle stage
trades channels for resolution and the convolutions re-expand in between.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, ShapeError, ops


@dataclass(frozen=True)
class VitConfig:
    height: int = 64
    width: int = 64
    patch: int = 4
    embed: int = 128
    depth: int = 4
    heads: int = 4
    mask_ratio: float = 0.5

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ShapeError(f"patch {self.patch} must divide "
                             f"{self.height}x{self.width}")
        root = math.isqrt(self.patch)
        if root * root != self.patch:
            raise ShapeError(f"patch size {self.patch} is not a perfect "
                             "square (pixel shuffle needs an integer factor)")
        if self.embed % self.heads:
            raise ShapeError(f"embed {self.embed} not divisible by "
                             f"{self.heads} heads")
        if self.embed % self.patch:
            raise ShapeError(f"embed {self.embed} not divisible by patch "
                             f"{self.patch}; feature channels would not be "
                             "integral")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio {self.mask_ratio} not in [0, 1)")

    @property
    def grid(self):
        return self.height // self.patch, self.width // self.patch

    @property
    def n_patches(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def c_feature(self):
        return self.embed // self.patch

    @property
    def shuffle_factor(self):
        return math.isqrt(self.patch)


@dataclass(frozen=True)
class MaskSpec:
    n_patches: int
    visible: np.ndarray
    masked: np.ndarray
    seed: int

    def __post_init__(self):
        both = np.concatenate([self.visible, self.masked])
        if not np.array_equal(np.sort(both), np.arange(self.n_patches)):
            raise ShapeError("visible/masked must partition the patch set")


def random_mask(n_patches, ratio, seed):
    """Uniform sample (without replacement) of floor(ratio * L) patches."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio {ratio} not in [0, 1)")
    n_masked = int(math.floor(ratio * n_patches))
    perm = np.random.default_rng(seed).permutation(n_patches)
    return MaskSpec(n_patches,
                    visible=np.sort(perm[n_masked:]),
                    masked=np.sort(perm[:n_masked]),
                    seed=seed)


def patchify(image, patch):
    """(3,H,W) -> (L, 3*P*P) row-major patch vectors."""
    image = ops.as_tensor(image)
    c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch {patch} must divide image {h}x{w}")
    gh, gw = h // patch, w // patch
    x = ops.reshape(image, (c, gh, patch, gw, patch))
    x = ops.transpose(x, (1, 3, 0, 2, 4))   # (gh, gw, c, P, P)
    return ops.reshape(x, (gh * gw, c * patch * patch))


def unpatchify(tokens, grid):
    """(L,C) tokens -> (C, gh, gw) grid, inverse of the patch row order."""
    tokens = ops.as_tensor(tokens)
    gh, gw = grid
    if tokens.shape[0] != gh * gw:
        raise ShapeError(f"{tokens.shape[0]} tokens cannot fill a "
                         f"{gh}x{gw} grid")
    x = ops.reshape(tokens, (gh, gw, tokens.shape[1]))
    return ops.transpose(x, (2, 0, 1))


def _repeat_row(vec, n):
    # (C,) -> (n, C) differentiable broadcast via a constant ones column
    vec2 = ops.reshape(vec, (1, vec.shape[0]))
    ones = Tensor(np.ones((n, 1), dtype=vec.dtype))
    return ops.matmul(ones, vec2)


def scatter_mask_tokens(visible_latents, spec, mask_token, pos_emb):
    """Rebuild the full (L,C) sequence: latents at their original indices,
    mask token + positional embedding at the dropped ones."""
    if visible_latents.shape[0] != len(spec.visible):
        raise ShapeError(f"{visible_latents.shape[0]} latents for "
                         f"{len(spec.visible)} visible positions")
    base = Tensor(np.zeros((spec.n_patches, visible_latents.shape[1]),
                           dtype=visible_latents.dtype))
    out = ops.scatter_rows(base, spec.visible, visible_latents)
    if len(spec.masked):
        rows = ops.add(_repeat_row(mask_token, len(spec.masked)),
                       ops.gather_rows(pos_emb, spec.masked))
        out = ops.scatter_rows(out, spec.masked, rows)
    return out


def readout_fuse(tokens, cls_token, w, b):
    """Concatenate the class token onto every patch token, project 2C -> C."""
    rep = _repeat_row(cls_token, tokens.shape[0])
    return ops.linear(ops.concat([tokens, rep], axis=1), w, b)


@dataclass
class EncoderOutput:
    cls_token: Tensor      # (C,)
    tokens: Tensor         # (L, C) after mask-token scatter + fusion
    feature_map: Tensor    # (C_f, H, W)


class Encoder:
    """Parameter container + forward pass. All learnables are registered in
    the shared ParamStore; `self.params` maps name -> Tensor and is looked up
    at call time, so tests can swap individual entries."""

    def __init__(self, store, config, rng, prefix="encoder"):
        self.config = config
        self.store = store
        self.params = {}
        c = config.embed
        pv = 3 * config.patch * config.patch
        dt = store.dtype

        def add(name, value):
            p = store.add(f"{prefix}.{name}", value.astype(dt))
            self.params[name] = p
            return p

        add("patch_w", rng.standard_normal((pv, c)) * 0.02)
        add("patch_b", np.zeros(c))
        add("pos_emb", rng.standard_normal((config.n_patches, c)) * 0.02)
        add("cls_token", rng.standard_normal(c) * 0.02)
        add("mask_token", rng.standard_normal(c) * 0.02)
        for i in range(config.depth):
            add(f"block{i}.ln1_g", np.ones(c))
            add(f"block{i}.ln1_b", np.zeros(c))
            add(f"block{i}.qkv_w", rng.standard_normal((c, 3 * c)) * 0.02)
            add(f"block{i}.qkv_b", np.zeros(3 * c))
            add(f"block{i}.proj_w", rng.standard_normal((c, c)) * 0.02)
            add(f"block{i}.proj_b", np.zeros(c))
            add(f"block{i}.ln2_g", np.ones(c))
            add(f"block{i}.ln2_b", np.zeros(c))
            add(f"block{i}.mlp_w1", rng.standard_normal((c, 4 * c)) * 0.02)
            add(f"block{i}.mlp_b1", np.zeros(4 * c))
            add(f"block{i}.mlp_w2", rng.standard_normal((4 * c, c)) * 0.02)
            add(f"block{i}.mlp_b2", np.zeros(c))
        add("ln_f_g", np.ones(c))
        add("ln_f_b", np.zeros(c))
        add("fuse_w", rng.standard_normal((2 * c, c)) * 0.02)
        add("fuse_b", np.zeros(c))
        cf = config.c_feature
        add("up1_w", rng.standard_normal((c, c, 3, 3))
            * np.sqrt(2.0 / (c * 9)))
        add("up1_b", np.zeros(c))
        add("up2_w", rng.standard_normal((c, cf, 3, 3))
            * np.sqrt(2.0 / (cf * 9)))
        add("up2_b", np.zeros(c))

    def _p(self, name):
        return self.params[name]

    def _attention(self, x, i):
        cfg = self.config
        t, c = x.shape
        d = c // cfg.heads
        qkv = ops.linear(x, self._p(f"block{i}.qkv_w"),
                         self._p(f"block{i}.qkv_b"))
        q, k, v = (qkv[:, 0:c], qkv[:, c:2 * c], qkv[:, 2 * c:3 * c])

        def heads(m):  # (T,C) -> (heads, T, d)
            return ops.transpose(ops.reshape(m, (t, cfg.heads, d)), (1, 0, 2))

        q, k, v = heads(q), heads(k), heads(v)
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))),
                         1.0 / np.sqrt(d))
        attn = ops.softmax(scores, axis=-1)
        out = ops.matmul(attn, v)                        # (heads, T, d)
        out = ops.reshape(ops.transpose(out, (1, 0, 2)), (t, c))
        return ops.linear(out, self._p(f"block{i}.proj_w"),
                          self._p(f"block{i}.proj_b"))

    def _block(self, x, i):
        h = ops.layer_norm(x, self._p(f"block{i}.ln1_g"),
                           self._p(f"block{i}.ln1_b"))
        x = ops.add(x, self._attention(h, i))
        h = ops.layer_norm(x, self._p(f"block{i}.ln2_g"),
                           self._p(f"block{i}.ln2_b"))
        h = ops.linear(h, self._p(f"block{i}.mlp_w1"),
                       self._p(f"block{i}.mlp_b1"))
        h = ops.gelu(h)
        h = ops.linear(h, self._p(f"block{i}.mlp_w2"),
                       self._p(f"block{i}.mlp_b2"))
        return ops.add(x, h)

    def vit_forward(self, visible_tokens):
        """Visible embedded tokens (V,C) -> (class token (C,), latents (V,C))."""
        cls = ops.reshape(self._p("cls_token"), (1, self.config.embed))
        x = ops.concat([cls, visible_tokens], axis=0)
        for i in range(self.config.depth):
            x = self._block(x, i)
        x = ops.layer_norm(x, self._p("ln_f_g"), self._p("ln_f_b"))
        return ops.reshape(x[0:1, :], (self.config.embed,)), x[1:, :]

    def upsample(self, grid):
        r = self.config.shuffle_factor
        x = ops.conv2d(grid, self._p("up1_w"), self._p("up1_b"), padding=1)
        x = ops.pixel_shuffle(ops.gelu(x), r)
        x = ops.conv2d(x, self._p("up2_w"), self._p("up2_b"), padding=1)
        return ops.pixel_shuffle(ops.gelu(x), r)

    def encode(self, image, seed=None):
        """Full forward pass for one (3,H,W) view.

        seed selects the random patch mask; None disables masking entirely
        (deterministic inference mode for probes and rendering).
        """
        cfg = self.config
        image = ops.as_tensor(image)
        if image.shape != (3, cfg.height, cfg.width):
            raise ShapeError(f"image {image.shape} does not match configured "
                             f"(3,{cfg.height},{cfg.width})")
        tokens = ops.linear(patchify(image, cfg.patch),
                            self._p("patch_w"), self._p("patch_b"))
        tokens = ops.add(tokens, self._p("pos_emb"))
        if seed is None:
            spec = random_mask(cfg.n_patches, 0.0, seed=0)
        else:
            spec = random_mask(cfg.n_patches, cfg.mask_ratio, seed)
        visible = (tokens if len(spec.masked) == 0
                   else ops.gather_rows(tokens, spec.visible))
        cls, latents = self.vit_forward(visible)
        full = scatter_mask_tokens(latents, spec, self._p("mask_token"),
                                   self._p("pos_emb"))
        fused = readout_fuse(full, cls, self._p("fuse_w"), self._p("fuse_b"))
        grid = unpatchify(fused, cfg.grid)
        return EncoderOutput(cls, fused, self.upsample(grid))


def encode_views(encoder, images, seeds):
    """Encode a batch of views; seeds[i] = None disables masking for view i."""
    if len(images) != len(seeds):
        raise ShapeError("one seed (or None) per view required")
    return [encoder.encode(img, seed) for img, seed in zip(images, seeds)]
