"""Procedural glyph domains: a desk-scale source/target pair with distractor classes.

Glyphs are stroke lists in upright canonical coordinates ([-1, 1]^2, y up).
The source domain draws filled strokes on smooth gradients; the target
domain draws stroke outlines on textured backgrounds.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .core import DatasetSplit, InputError, Pool

GLYPHS: dict[str, list[tuple[float, float, float, float]]] = {
    "T": [(-0.6, 0.65, 0.6, 0.65), (0.0, 0.65, 0.0, -0.7)],
    "L": [(-0.4, 0.7, -0.4, -0.7), (-0.4, -0.7, 0.5, -0.7)],
    "E": [(-0.4, 0.7, -0.4, -0.7), (-0.4, 0.7, 0.5, 0.7), (-0.4, 0.0, 0.3, 0.0), (-0.4, -0.7, 0.5, -0.7)],
    "F": [(-0.4, 0.7, -0.4, -0.7), (-0.4, 0.7, 0.5, 0.7), (-0.4, 0.0, 0.3, 0.0)],
    "arrow": [(0.0, -0.7, 0.0, 0.7), (0.0, 0.7, -0.45, 0.25), (0.0, 0.7, 0.45, 0.25)],
    "Y": [(0.0, -0.7, 0.0, 0.0), (0.0, 0.0, -0.55, 0.7), (0.0, 0.0, 0.55, 0.7)],
    "P": [(-0.4, -0.7, -0.4, 0.7), (-0.4, 0.7, 0.4, 0.7), (0.4, 0.7, 0.4, 0.0), (0.4, 0.0, -0.4, 0.0)],
    "h": [(-0.4, 0.7, -0.4, -0.7), (-0.4, 0.0, 0.4, 0.0), (0.4, 0.0, 0.4, -0.7)],
    # distractors: never labeled, rendered in the target style only
    "J": [(0.3, 0.7, 0.3, -0.7), (0.3, -0.7, -0.4, -0.7), (-0.4, -0.7, -0.4, -0.3)],
    "tri": [(-0.6, -0.6, 0.6, -0.6), (0.6, -0.6, 0.0, 0.7), (0.0, 0.7, -0.6, -0.6)],
    "k": [(-0.4, 0.7, -0.4, -0.7), (-0.4, 0.0, 0.4, 0.7), (-0.4, 0.0, 0.4, -0.7)],
    "r": [(-0.3, -0.7, -0.3, 0.4), (-0.3, 0.1, 0.45, 0.5)],
    # pretraining glyphs: disjoint from both sets above, drawn in the neutral style
    "X": [(-0.55, -0.7, 0.55, 0.7), (-0.55, 0.7, 0.55, -0.7)],
    "Z": [(-0.5, 0.7, 0.5, 0.7), (0.5, 0.7, -0.5, -0.7), (-0.5, -0.7, 0.5, -0.7)],
    "N": [(-0.45, -0.7, -0.45, 0.7), (-0.45, 0.7, 0.45, -0.7), (0.45, -0.7, 0.45, 0.7)],
    "V": [(-0.55, 0.7, 0.0, -0.7), (0.0, -0.7, 0.55, 0.7)],
    "plus": [(-0.6, 0.0, 0.6, 0.0), (0.0, -0.6, 0.0, 0.6)],
    "box": [(-0.5, -0.5, 0.5, -0.5), (0.5, -0.5, 0.5, 0.5), (0.5, 0.5, -0.5, 0.5), (-0.5, 0.5, -0.5, -0.5)],
    "C": [(0.45, 0.7, -0.45, 0.7), (-0.45, 0.7, -0.45, -0.7), (-0.45, -0.7, 0.45, -0.7)],
    "U": [(-0.45, 0.7, -0.45, -0.7), (-0.45, -0.7, 0.45, -0.7), (0.45, -0.7, 0.45, 0.7)],
    "W": [(-0.6, 0.7, -0.3, -0.7), (-0.3, -0.7, 0.0, 0.2), (0.0, 0.2, 0.3, -0.7), (0.3, -0.7, 0.6, 0.7)],
    "G": [(0.45, 0.7, -0.45, 0.7), (-0.45, 0.7, -0.45, -0.7), (-0.45, -0.7, 0.45, -0.7),
          (0.45, -0.7, 0.45, 0.0), (0.45, 0.0, 0.05, 0.0)],
    "d": [(0.4, 0.7, 0.4, -0.7), (0.4, -0.7, -0.4, -0.7), (-0.4, -0.7, -0.4, 0.0), (-0.4, 0.0, 0.4, 0.0)],
    "bolt": [(0.3, 0.7, -0.3, 0.0), (-0.3, 0.0, 0.3, 0.0), (0.3, 0.0, -0.3, -0.7)],
}
CLASS_GLYPHS = ("T", "L", "E", "F", "arrow", "Y", "P", "h")
DISTRACTOR_GLYPHS = ("J", "tri", "k", "r")
PRETRAIN_GLYPHS = ("X", "Z", "N", "V", "plus", "box", "C", "U", "W", "G", "d", "bolt")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    num_distractor_classes: int = 4
    image_size: int = 32
    channels: int = 3
    source_per_class: int = 160
    source_test_per_class: int = 40
    target_per_class: int = 100
    distractor_per_class: Optional[int] = None  # default: match the unlabeled per-class count
    kshot: int = 3
    val_per_class: int = 3
    test_fraction: float = 0.2
    orientation_noise: float = 15.0  # degrees, uniform +-
    scale_range: tuple[float, float] = (0.75, 1.0)
    shift: float = 0.12
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_GLYPHS):
            raise InputError(f"num_classes must lie in [1, {len(CLASS_GLYPHS)}]")
        if not 0 <= self.num_distractor_classes <= len(DISTRACTOR_GLYPHS):
            raise InputError(f"num_distractor_classes must lie in [0, {len(DISTRACTOR_GLYPHS)}]")
        if self.channels not in (1, 3) or self.image_size < 8:
            raise InputError("channels must be 1 or 3 and image_size >= 8")
        if self.orientation_noise < 0 or self.orientation_noise >= 45:
            raise InputError("orientation_noise must lie in [0, 45) degrees")

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def class_names(self) -> list[str]:
        return [f"c{i:02d}_{g}" for i, g in enumerate(CLASS_GLYPHS[:self.num_classes])]

    @property
    def distractor_names(self) -> list[str]:
        return [f"d{i:02d}_{g}" for i, g in enumerate(DISTRACTOR_GLYPHS[:self.num_distractor_classes])]


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size * 2 - 1
    x, y = np.meshgrid(c, -c)  # row 0 is the top of the image (y = +1)
    return x, y


def _segment_distance(x, y, segs: np.ndarray) -> np.ndarray:
    a, b = segs[:, None, None, :2], segs[:, None, None, 2:]
    p = np.stack([x, y], -1)[None]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0, 1)
    closest = a + t[..., None] * ab
    return np.sqrt(((p - closest) ** 2).sum(-1)).min(0)


def glyph_mask(glyph: str, size: int, angle_deg: float = 0.0, scale: float = 1.0,
               shift=(0.0, 0.0), thickness: float = 0.13, outline: float = 0.0) -> np.ndarray:
    """Anti-aliased coverage in [0, 1]; ``outline > 0`` draws only the stroke border."""
    segs = np.asarray(GLYPHS[glyph], dtype=np.float64).reshape(-1, 2, 2)
    th = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    segs = (segs @ rot.T) * scale + np.asarray(shift)
    x, y = _grid(size)
    d = _segment_distance(x, y, segs.reshape(-1, 4))
    px = 2.0 / size
    if outline > 0:
        d = np.abs(d - thickness)
        thickness = outline
    return np.clip((thickness - d) / px + 0.5, 0.0, 1.0)


def _smooth_background(rng, size, channels):
    x, y = _grid(size)
    c0, c1 = rng.uniform(0.0, 1.0, (2, channels))
    th = rng.uniform(0, 2 * np.pi)
    t = (np.cos(th) * x + np.sin(th) * y + 1) / 2
    return c0 * (1 - t[..., None]) + c1 * t[..., None]


def _textured_background(rng, size, channels):
    x, y = _grid(size)
    base = rng.uniform(0.15, 0.85, channels)
    th = rng.uniform(0, np.pi)
    freq = rng.uniform(4, 9)
    stripes = 0.18 * np.sin(freq * np.pi * (np.cos(th) * x + np.sin(th) * y) + rng.uniform(0, 2 * np.pi))
    noise = rng.normal(0, 0.12, (size, size, 1))
    return base + (stripes[..., None] + noise) * rng.uniform(0.5, 1.0, channels)


def _contrasting_color(rng, background: np.ndarray) -> np.ndarray:
    mean = background.reshape(-1, background.shape[-1]).mean(0)
    color = rng.uniform(0, 1, mean.shape)
    for _ in range(20):
        if np.abs(color - mean).mean() > 0.35:
            break
        color = rng.uniform(0, 1, mean.shape)
    else:
        color = np.where(mean > 0.5, 0.0, 1.0)
    return color


def render(glyph: str, style: str, rng: np.random.Generator, spec: SyntheticSpec,
           return_mask: bool = False):
    """Draw one glyph in ``style`` ("source", "target" or "neutral") as an H x W x C float image."""
    size, ch = spec.image_size, spec.channels
    angle = rng.uniform(-spec.orientation_noise, spec.orientation_noise)
    scale = rng.uniform(*spec.scale_range)
    shift = rng.uniform(-spec.shift, spec.shift, 2)
    if style == "source":
        bg = _smooth_background(rng, size, ch)
        mask = glyph_mask(glyph, size, angle, scale, shift, thickness=rng.uniform(0.1, 0.15))
    elif style == "target":
        bg = _textured_background(rng, size, ch)
        mask = glyph_mask(glyph, size, angle, scale, shift, thickness=rng.uniform(0.14, 0.2),
                          outline=rng.uniform(0.035, 0.05))
    elif style == "neutral":
        bg = np.full((size, size, ch), rng.uniform(0.0, 1.0, ch)) + rng.normal(0, 0.05, (size, size, 1))
        outline = rng.uniform(0.035, 0.05) if rng.random() < 0.5 else 0.0
        mask = glyph_mask(glyph, size, angle, scale, shift, thickness=rng.uniform(0.1, 0.2), outline=outline)
    else:
        raise InputError(f"unknown style {style!r}")
    fg = _contrasting_color(rng, bg)
    img = bg * (1 - mask[..., None]) + fg * mask[..., None]
    # quantise to 8 bits so images survive a PNG round trip unchanged
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    img = img.astype(np.float32)
    return (img, mask) if return_mask else img


@dataclass
class SyntheticPair:
    spec: SyntheticSpec
    source: Pool  # labeled source training pool
    source_test: Pool  # held-out source, for measuring the domain gap
    split: DatasetSplit
    target_full: Pool  # all labeled target images before splitting
    distractors: Pool  # target-style images of extra classes, labeled >= num_classes


def _render_pool(glyphs, names, per_class, style, domain, rng, spec, label_offset=0):
    images, labels, ids = [], [], []
    for c, (g, name) in enumerate(zip(glyphs, names)):
        for i in range(per_class):
            images.append(render(g, style, rng, spec))
            labels.append(c + label_offset)
            ids.append(f"{domain}/{name}/{domain}_{name}_{i:05d}.png")
    shape = (0, spec.image_size, spec.image_size, spec.channels)
    arr = np.stack(images) if images else np.zeros(shape, np.float32)
    return Pool(arr, labels, ids, domain)


def generate_synthetic_pair(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticPair:
    """Render the full desk-scale pair; deterministic in ``spec.seed``."""
    from .data import build_kshot_split

    seeds = np.random.SeedSequence(spec.seed).spawn(4)
    glyphs = CLASS_GLYPHS[:spec.num_classes]
    names = spec.class_names
    rng = np.random.default_rng(seeds[0])
    source = _render_pool(glyphs, names, spec.source_per_class + spec.source_test_per_class,
                          "source", "source", rng, spec)
    src_idx = np.arange(len(source)).reshape(spec.num_classes, -1)
    source_train = source.subset(src_idx[:, :spec.source_per_class].ravel())
    source_test = source.subset(src_idx[:, spec.source_per_class:].ravel())

    target = _render_pool(glyphs, names, spec.target_per_class, "target", "target",
                          np.random.default_rng(seeds[1]), spec)
    lab, val, unl, test = build_kshot_split(target, spec.kshot, spec.val_per_class,
                                            np.random.default_rng(seeds[2]), test_fraction=spec.test_fraction)
    per_class = spec.distractor_per_class
    if per_class is None:
        per_class = len(unl) // spec.num_classes
    distractors = _render_pool(DISTRACTOR_GLYPHS[:spec.num_distractor_classes], spec.distractor_names,
                               per_class, "target", "target", np.random.default_rng(seeds[3]), spec,
                               label_offset=spec.num_classes)
    split = DatasetSplit(source_train, lab, unl, val, test)
    return SyntheticPair(spec, source_train, source_test, split, target, distractors)


def generate_pretrain_pool(per_class: int = 200, spec: SyntheticSpec = SyntheticSpec(),
                           seed: int = 0) -> Pool:
    """Labeled neutral-style images of glyphs outside the class and distractor sets.

    Stands in for a generic pretraining corpus: none of its classes is ever
    evaluated, and its style belongs to neither domain.
    """
    names = [f"p{i:02d}_{g}" for i, g in enumerate(PRETRAIN_GLYPHS)]
    return _render_pool(PRETRAIN_GLYPHS, names, per_class, "neutral", "pretrain",
                        np.random.default_rng(seed), spec)
