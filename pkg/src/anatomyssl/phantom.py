"""Synthetic ultrasound-like phantom generation.

Each phantom is a grayscale image containing a few smooth anatomical
structures (ellipses, annuli, crescents) on a darker background, together
with one binary mask per structure and a 3-way class label determined by the
shape families present:

* class 0: ellipses only
* class 1: contains at least one annulus (and no crescents)
* class 2: contains at least one crescent (and no annuli)

Structures are rendered back-to-front; a structure painted later occludes
(and is subtracted from) earlier masks, so masks are pairwise disjoint by
construction. Region intensities are kept pairwise distinct so that with
speckle disabled the image's intensity edges coincide exactly with mask
boundaries. Final images are quantized to the 16-bit grid, which makes the
on-disk corpus round-trip bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError

SHAPE_FAMILIES = ("ellipse", "annulus", "crescent")

# Rayleigh scale with unit mean; used as the base multiplicative speckle law.
_RAYLEIGH_UNIT_MEAN_SCALE = math.sqrt(2.0 / math.pi)

# Minimum separation between any two region intensities (background included);
# guarantees intensity edges coincide with mask boundaries pre-speckle.
_MIN_INTENSITY_GAP = 0.02


@dataclass
class PhantomSpec:
    """Parameters for one phantom draw. A pure function of this spec + seed."""

    image_size: int = 224
    n_structures_range: tuple = (2, 5)
    shape_family: tuple = SHAPE_FAMILIES
    contrast_range: tuple = (0.15, 0.5)
    speckle_strength: float = 0.35
    class_id: int = 0
    seed: int = 0

    def validate(self):
        if self.image_size < 64 or self.image_size % 32 != 0:
            raise ConfigError(
                f"'image_size' = {self.image_size} must be a multiple of 32, >= 64")
        lo, hi = self.n_structures_range
        if lo < 1 or hi < lo:
            raise ConfigError(
                f"'n_structures_range' = {self.n_structures_range} needs 1 <= lo <= hi")
        cl, ch = self.contrast_range
        if not (0.0 <= cl <= ch <= 1.0):
            raise ConfigError(
                f"'contrast_range' = {self.contrast_range} must lie in [0, 1], lo <= hi")
        if not 0.0 <= self.speckle_strength <= 1.0:
            raise ConfigError(
                f"'speckle_strength' = {self.speckle_strength} outside [0, 1]")
        if self.class_id not in (0, 1, 2):
            raise ConfigError(f"'class_id' = {self.class_id} must be 0, 1, or 2")
        for fam in self.shape_family:
            if fam not in SHAPE_FAMILIES:
                raise ConfigError(f"unknown shape family {fam!r}")
        return self


@dataclass
class PhantomSample:
    image: np.ndarray                       # (H, W) float64 in [0, 1], 16-bit grid
    masks: list = field(default_factory=list)  # list of (H, W) bool, disjoint
    class_id: int = 0
    seed: int = 0


def apply_speckle(image: np.ndarray, strength: float, seed: int) -> np.ndarray:
    """Multiplicative unit-mean Rayleigh-like speckle, clipped to [0, 1].

    strength=0 returns the input unchanged (bit-identical copy).
    """
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(f"'strength' = {strength} outside [0, 1]")
    if np.min(image) < 0.0 or np.max(image) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    if strength == 0.0:
        return image.copy()
    rng = np.random.default_rng(seed)
    rayleigh = rng.rayleigh(scale=_RAYLEIGH_UNIT_MEAN_SCALE, size=image.shape)
    gain = 1.0 + strength * (rayleigh - 1.0)
    return np.clip(image * gain, 0.0, 1.0)


def _ellipse_mask(size, cx, cy, a, b, angle):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    ca, sa = math.cos(angle), math.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _draw_shape(size, family, rng):
    """Rasterize one structure of the given family; returns a bool mask."""
    a = rng.uniform(0.08, 0.2) * size
    b = rng.uniform(0.08, 0.2) * size
    angle = rng.uniform(0.0, math.pi)
    margin = max(a, b) + 2
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    outer = _ellipse_mask(size, cx, cy, a, b, angle)
    if family == "ellipse":
        return outer
    if family == "annulus":
        ratio = rng.uniform(0.35, 0.6)
        inner = _ellipse_mask(size, cx, cy, a * ratio, b * ratio, angle)
        return outer & ~inner
    if family == "crescent":
        r = min(a, b) * rng.uniform(0.7, 1.0)
        off = rng.uniform(0.6, 0.9) * max(a, b)
        theta = rng.uniform(0.0, 2 * math.pi)
        bx, by = cx + off * math.cos(theta), cy + off * math.sin(theta)
        bite = _ellipse_mask(size, bx, by, r, r, 0.0)
        return outer & ~bite
    raise ConfigError(f"unknown shape family {family!r}")


def _class_families(class_id, allowed, n, rng):
    """Family per structure; the class-defining shape is drawn last (on top)."""
    if class_id == 0:
        return ["ellipse"] * n
    defining = "annulus" if class_id == 1 else "crescent"
    pool = [f for f in ("ellipse", defining) if f in allowed] or [defining]
    fams = [pool[rng.integers(len(pool))] for _ in range(n - 1)]
    fams.append(defining)
    return fams


def _sample_intensity(rng, contrast_range, taken):
    """Background-offset intensity distinct (by a gap) from all taken levels."""
    lo, hi = contrast_range
    for _ in range(200):
        offset = rng.uniform(lo, hi) if hi > lo else lo
        sign = 1.0 if rng.random() < 0.5 else -1.0
        value = taken[0] + sign * max(offset, _MIN_INTENSITY_GAP * 1.5)
        if not 0.02 <= value <= 0.98:
            value = taken[0] + max(offset, _MIN_INTENSITY_GAP * 1.5)
        if all(abs(value - t) >= _MIN_INTENSITY_GAP for t in taken):
            return float(np.clip(value, 0.02, 0.98))
    # deterministic fallback: march up the intensity ladder
    value = max(taken) + _MIN_INTENSITY_GAP * 2
    return float(min(value, 0.98))


def generate_phantom(spec: PhantomSpec) -> PhantomSample:
    """Render a phantom: deterministic in (spec, seed), masks disjoint and nonempty."""
    spec.validate()
    root = np.random.SeedSequence([spec.seed & 0xFFFFFFFFFFFFFFFF, 0xA11A])
    geom_seed, speckle_seed = root.spawn(2)
    rng = np.random.default_rng(geom_seed)

    size = spec.image_size
    lo, hi = spec.n_structures_range
    n = int(rng.integers(lo, hi + 1))
    families = _class_families(spec.class_id, spec.shape_family, n, rng)

    background = float(rng.uniform(0.1, 0.3))
    image = np.full((size, size), background, dtype=np.float64)
    masks: list = []
    intensities = [background]

    min_keep = 8  # do not let a new shape erode an earlier mask below this
    for family in families:
        placed = None
        for _ in range(20):
            cand = _draw_shape(size, family, rng)
            if cand.sum() < 16:
                continue
            if all((m & ~cand).sum() >= min_keep for m in masks):
                placed = cand
                break
        if placed is None:
            if cand.sum() < 16:
                continue
            placed = cand
        level = _sample_intensity(rng, spec.contrast_range, intensities)
        intensities.append(level)
        image[placed] = level
        masks = [m & ~placed for m in masks]
        masks.append(placed)

    masks = [m for m in masks if m.any()]
    image = apply_speckle(image, spec.speckle_strength,
                          int(speckle_seed.generate_state(1, np.uint64)[0]))
    # snap to the 16-bit grid so the stored corpus round-trips exactly
    image = np.round(image * 65535.0) / 65535.0
    return PhantomSample(image=image, masks=masks, class_id=spec.class_id,
                         seed=spec.seed)


def corpus_sample_seed(corpus_seed: int, index: int) -> int:
    """Stable per-sample seed stream for a corpus."""
    ss = np.random.SeedSequence([corpus_seed & 0xFFFFFFFFFFFFFFFF, index])
    return int(ss.generate_state(1, np.uint64)[0])


def build_corpus(n_samples: int, *, image_size=224, n_structures_range=(2, 5),
                 contrast_range=(0.15, 0.5), speckle_strength=0.35, n_classes=3,
                 seed=0):
    """Generate a balanced in-memory corpus; classes cycle 0..n_classes-1."""
    samples = []
    for i in range(n_samples):
        spec = PhantomSpec(
            image_size=image_size,
            n_structures_range=tuple(n_structures_range),
            contrast_range=tuple(contrast_range),
            speckle_strength=speckle_strength,
            class_id=i % n_classes,
            seed=corpus_sample_seed(seed, i),
        )
        samples.append(generate_phantom(spec))
    return samples
