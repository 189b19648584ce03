"""Dual-view construction with identically transformed masks.

Geometric transforms (crop, horizontal flip, resize) are applied to the image
and every mask; photometric transforms touch the image only, and masks are
resampled nearest-neighbor so they stay binary. The overlap of the two crop
rectangles is tracked in source coordinates and in each view's coordinates,
and feeds the damaged-region prediction path:

* ``downsample_mask`` block-averages a binary mask to a feature-map scale,
  keeping fractional weights (exact mass conservation);
* ``sample_mask_indices`` draws K structure indices weighted by coverage;
* ``damage`` composes local pixel shuffling, additive Gaussian noise and
  rectangular occlusion, in that order.

Everything is a pure function of its inputs and the supplied rng, so data
workers seeded per (run seed, epoch, sample index) are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import AugmentConfig, ConfigError


class SkipSample(Exception):
    """Signal that a sample cannot produce a usable pair and should be dropped."""


@dataclass
class AugmentTransform:
    crop_rect: tuple           # (x, y, w, h) in source pixels
    hflip: bool
    out_size: int
    source_size: int
    brightness: float = 1.0    # multiplicative
    contrast: float = 1.0      # scale around the crop mean
    gamma: float = 1.0         # grayscale saturation analogue
    grayscale: bool = False    # recorded for protocol parity; identity on 1-channel
    blur_sigma: float = 0.0
    solarize_threshold: Optional[float] = None


@dataclass
class DamageParams:
    alpha: float = 0.15   # per-window shuffle probability
    beta: float = 0.2     # additive Gaussian noise std
    gamma: float = 0.05   # occluded area fraction target
    patch: int = 4        # local shuffle window, pixels

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"'alpha' = {self.alpha} outside [0, 1]")
        if self.beta < 0.0:
            raise ConfigError(f"'beta' = {self.beta} must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"'gamma' = {self.gamma} outside [0, 1]")
        if self.patch < 1:
            raise ConfigError(f"'patch' = {self.patch} must be >= 1")
        return self


@dataclass
class OverlapRects:
    v1: tuple   # (x, y, w, h) in view-1 pixels, float
    v2: tuple   # (x, y, w, h) in view-2 pixels, float
    src: tuple  # (x, y, w, h) in source pixels, int


@dataclass
class ViewPair:
    v1: np.ndarray
    v2: np.ndarray
    masks_v1: list
    masks_v2: list
    overlap: Optional[OverlapRects]
    overlap_crop: Optional[np.ndarray]  # intact source crop resized for encoding


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resize (separable; keeps float dtype)."""
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    if not np.issubdtype(img.dtype, np.floating):
        img = img.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None].astype(img.dtype)
    wx = (xs - x0)[None, :].astype(img.dtype)
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)
    rows = img[:, x0c] * (1 - wx) + img[:, x1c] * wx
    return rows[y0c] * (1 - wy) + rows[y1c] * wy


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center nearest-neighbor resize; preserves binary values."""
    in_h, in_w = mask.shape
    if (in_h, in_w) == (out_h, out_w):
        return mask.copy()
    ys = np.clip(((np.arange(out_h) + 0.5) * in_h / out_h).astype(np.int64), 0, in_h - 1)
    xs = np.clip(((np.arange(out_w) + 0.5) * in_w / out_w).astype(np.int64), 0, in_w - 1)
    return mask[np.ix_(ys, xs)]


def sample_transform(rng: np.random.Generator, policy: str, cfg: AugmentConfig,
                     source_size: int) -> AugmentTransform:
    """Draw one augmentation; ``policy`` is 'primary' or 'secondary'.

    The secondary policy solarizes with probability ``cfg.solarize_prob`` and
    blurs rarely; the primary policy never solarizes and always blurs.
    """
    if policy not in ("primary", "secondary"):
        raise ConfigError(f"unknown augmentation policy {policy!r}")
    area = source_size * source_size
    while True:
        frac = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
        aspect = math.exp(rng.uniform(math.log(cfg.crop_aspect_min),
                                      math.log(cfg.crop_aspect_max)))
        w = int(round(math.sqrt(frac * area * aspect)))
        h = int(round(math.sqrt(frac * area / aspect)))
        w = min(max(w, 1), source_size)
        h = min(max(h, 1), source_size)
        got = (w * h) / area
        if cfg.crop_scale_min <= got <= cfg.crop_scale_max:
            break
    x = int(rng.integers(0, source_size - w + 1))
    y = int(rng.integers(0, source_size - h + 1))
    hflip = bool(rng.random() < cfg.hflip_prob)

    brightness = contrast = gamma = 1.0
    if rng.random() < cfg.jitter_prob:
        brightness = float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness))
        contrast = float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast))
        gamma = float(rng.uniform(1 - cfg.gamma_jitter, 1 + cfg.gamma_jitter))
    grayscale = bool(rng.random() < cfg.grayscale_prob)
    blur_prob = cfg.blur_prob_primary if policy == "primary" else cfg.blur_prob_secondary
    blur_sigma = 0.0
    if rng.random() < blur_prob:
        blur_sigma = float(rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max))
    solarize = None
    if policy == "secondary" and rng.random() < cfg.solarize_prob:
        solarize = float(cfg.solarize_threshold)

    return AugmentTransform(
        crop_rect=(x, y, w, h), hflip=hflip, out_size=cfg.out_size,
        source_size=source_size, brightness=brightness, contrast=contrast,
        gamma=gamma, grayscale=grayscale, blur_sigma=blur_sigma,
        solarize_threshold=solarize,
    )


def _apply_photometric(view: np.ndarray, t: AugmentTransform) -> np.ndarray:
    changed = False
    out = view
    if t.brightness != 1.0:
        out = out * t.brightness
        changed = True
    if t.contrast != 1.0:
        mean = out.mean()
        out = mean + (out - mean) * t.contrast
        changed = True
    if t.gamma != 1.0:
        out = np.clip(out, 0.0, 1.0) ** t.gamma
        changed = True
    if t.blur_sigma > 0.0:
        out = gaussian_filter(out, sigma=t.blur_sigma)
        changed = True
    if changed:
        out = np.clip(out, 0.0, 1.0)
    if t.solarize_threshold is not None:
        out = np.where(out >= t.solarize_threshold, 1.0 - out, out)
    return out


def apply_view(image: np.ndarray, masks, t: AugmentTransform):
    """Apply geometry to image+masks and photometrics to the image only."""
    H, W = image.shape
    x, y, w, h = t.crop_rect
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > W or y + h > H:
        raise ValueError(f"crop_rect {t.crop_rect} outside {W}x{H} image bounds")
    for m in masks:
        if m.shape != image.shape:
            raise ValueError("mask shape does not match image shape")

    crop = image[y:y + h, x:x + w]
    if t.hflip:
        crop = crop[:, ::-1]
    view = resize_bilinear(crop, t.out_size, t.out_size)
    if masks:
        stacked = np.stack([m[y:y + h, x:x + w] for m in masks])
        if t.hflip:
            stacked = stacked[:, :, ::-1]
        if (h, w) == (t.out_size, t.out_size):
            resampled = stacked.copy()
        else:
            ys = np.clip(((np.arange(t.out_size) + 0.5) * h
                          / t.out_size).astype(np.int64), 0, h - 1)
            xs = np.clip(((np.arange(t.out_size) + 0.5) * w
                          / t.out_size).astype(np.int64), 0, w - 1)
            resampled = stacked[:, ys[:, None], xs[None, :]]
        out_masks = list(resampled)
    else:
        out_masks = []
    view = _apply_photometric(view, t)
    return view, out_masks


def compute_overlap(t1: AugmentTransform, t2: AugmentTransform,
                    min_side: int = 32) -> Optional[OverlapRects]:
    """Intersection of the two crops, mapped into each view; None if too small.

    The threshold is an area of ``min_side**2`` source pixels.
    """
    if t1.source_size != t2.source_size:
        raise ValueError("transforms reference different source sizes")
    x1, y1, w1, h1 = t1.crop_rect
    x2, y2, w2, h2 = t2.crop_rect
    ix = max(x1, x2)
    iy = max(y1, y2)
    iw = min(x1 + w1, x2 + w2) - ix
    ih = min(y1 + h1, y2 + h2) - iy
    if iw <= 0 or ih <= 0 or iw * ih < min_side * min_side:
        return None

    def to_view(t: AugmentTransform):
        cx, cy, cw, ch = t.crop_rect
        sx = t.out_size / cw
        sy = t.out_size / ch
        vx = (ix - cx) * sx
        vy = (iy - cy) * sy
        vw = iw * sx
        vh = ih * sy
        if t.hflip:
            vx = t.out_size - (vx + vw)
        return (vx, vy, vw, vh)

    return OverlapRects(v1=to_view(t1), v2=to_view(t2), src=(ix, iy, iw, ih))


def map_view_rect_to_source(rect, t: AugmentTransform):
    """Inverse of the view mapping used by ``compute_overlap`` (float rect)."""
    vx, vy, vw, vh = rect
    cx, cy, cw, ch = t.crop_rect
    if t.hflip:
        vx = t.out_size - (vx + vw)
    sx = vx * cw / t.out_size + cx
    sy = vy * ch / t.out_size + cy
    return (sx, sy, vw * cw / t.out_size, vh * ch / t.out_size)


def downsample_mask(mask: np.ndarray, scale_size: int) -> np.ndarray:
    """Block-average a square mask to scale_size x scale_size fractional weights."""
    h, w = mask.shape
    if h != w:
        raise ValueError("mask must be square")
    if scale_size < 1 or h % scale_size != 0:
        raise ValueError(f"size {h} not divisible by scale {scale_size}")
    block = h // scale_size
    m = mask.astype(np.float64, copy=False)
    return m.reshape(scale_size, block, scale_size, block).mean(axis=(1, 3))


def downsample_ladder(mask: np.ndarray, sizes) -> list:
    """Downsample to several scales, pooling progressively from finer scales.

    Requires ``sizes`` sorted fine -> coarse with each dividing the previous;
    block means of block means equal the direct block mean exactly (sums of
    dyadic rationals), so this matches per-scale ``downsample_mask`` output.
    """
    out = []
    current = mask
    for size in sizes:
        current = downsample_mask(current, size)
        out.append(current)
    return out


def sample_mask_indices(masks_v1, masks_v2, k: int, rng: np.random.Generator,
                        min_pixels: int = 16) -> np.ndarray:
    """Draw K structure indices weighted by view-1 coverage.

    A structure is eligible only if it covers at least ``min_pixels`` in both
    views. Draws are without replacement while eligible candidates remain,
    then with replacement to fill K. Raises SkipSample when nothing is
    eligible.
    """
    cov1 = np.array([int(m.sum()) for m in masks_v1], dtype=np.int64)
    cov2 = np.array([int(m.sum()) for m in masks_v2], dtype=np.int64)
    eligible = np.flatnonzero((cov1 >= min_pixels) & (cov2 >= min_pixels))
    if eligible.size == 0:
        raise SkipSample("no mask meets the coverage threshold in both views")
    weights = cov1[eligible].astype(np.float64)
    weights /= weights.sum()

    chosen = []
    remaining = list(range(eligible.size))
    while len(chosen) < k and remaining:
        w = weights[remaining]
        pick = remaining[int(rng.choice(len(remaining), p=w / w.sum()))]
        chosen.append(int(eligible[pick]))
        remaining.remove(pick)
    while len(chosen) < k:
        pick = int(rng.choice(eligible.size, p=weights))
        chosen.append(int(eligible[pick]))
    return np.array(chosen, dtype=np.int64)


def _local_shuffle(img: np.ndarray, alpha: float, patch: int,
                   rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    H, W = img.shape
    rows = range(0, H, patch)
    cols = range(0, W, patch)
    gates = rng.random((len(rows), len(cols))) < alpha
    for bi, i0 in enumerate(rows):
        for bj, j0 in enumerate(cols):
            if gates[bi, bj]:
                win = out[i0:i0 + patch, j0:j0 + patch]
                flat = win.reshape(-1)
                out[i0:i0 + patch, j0:j0 + patch] = (
                    flat[rng.permutation(flat.size)].reshape(win.shape))
    return out


def _occlude(img: np.ndarray, gamma: float, rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    H, W = img.shape
    n = int(rng.integers(1, 4))
    fracs = rng.dirichlet(np.full(n, 2.0))
    for f in fracs:
        area = f * gamma * H * W
        if area < 1.0:
            continue
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        w = min(max(int(round(math.sqrt(area * aspect))), 1), W)
        h = min(max(int(round(area / w)), 1), H)
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        out[y:y + h, x:x + w] = 0.0
    return out


def damage(crop: np.ndarray, p: DamageParams, rng: np.random.Generator) -> np.ndarray:
    """Shuffle -> noise -> occlude; each stage is skipped (bit-exactly) at 0."""
    if crop.size == 0:
        raise ValueError("empty crop")
    p.validate()
    out = crop.copy()
    if p.alpha > 0.0:
        out = _local_shuffle(out, p.alpha, p.patch, rng)
    if p.beta > 0.0:
        noise = rng.normal(0.0, p.beta, out.shape).astype(out.dtype, copy=False)
        out = np.clip(out + noise, 0.0, 1.0)
    if p.gamma > 0.0:
        out = _occlude(out, p.gamma, rng)
    return out


def random_rect_masks(masks, rng: np.random.Generator):
    """Coverage-matched random rectangles; degraded stand-in for true masks."""
    out = []
    for m in masks:
        H, W = m.shape
        area = max(int(m.sum()), 1)
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        w = min(max(int(round(math.sqrt(area * aspect))), 1), W)
        h = min(max(int(round(area / w)), 1), H)
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        rect = np.zeros((H, W), dtype=bool)
        rect[y:y + h, x:x + w] = True
        out.append(rect)
    return out


def make_view_pair(image: np.ndarray, masks, t1: AugmentTransform,
                   t2: AugmentTransform, cfg: AugmentConfig) -> ViewPair:
    """Build both views plus the shared (intact) overlap crop for prediction."""
    v1, m1 = apply_view(image, masks, t1)
    v2, m2 = apply_view(image, masks, t2)
    overlap = compute_overlap(t1, t2, min_side=cfg.min_overlap_side)
    crop = None
    if overlap is not None:
        sx, sy, sw, sh = overlap.src
        crop = resize_bilinear(image[sy:sy + sh, sx:sx + sw],
                               cfg.overlap_size, cfg.overlap_size)
    return ViewPair(v1=v1, v2=v2, masks_v1=m1, masks_v2=m2,
                    overlap=overlap, overlap_crop=crop)
