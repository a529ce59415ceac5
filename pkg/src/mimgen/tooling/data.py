"""Procedural captioned shapes dataset.

Each sample is an anti-aliased circle, square or triangle in one of three
colors on a light or dark background, rendered at a random "original" size
and then cropped to the training size. The crop box and original size are
recorded as micro-conditioning, and a quality score derived from luminance
contrast plays the role of an aesthetic score.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ..conditioning import CaptionVocabulary, MicroConditioning

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.86, 0.16, 0.16),
    "green": (0.16, 0.70, 0.24),
    "blue": (0.16, 0.30, 0.86),
}
BACKGROUNDS = {"light": 0.92, "dark": 0.12}
SUPERSAMPLE = 4
MAX_EXTRA = 12  # original images are up to this many pixels larger than the crop
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class DatasetSpec:
    image_size: int = 32
    count: int = 64
    seed: int = 0

    @staticmethod
    def combinations() -> list[tuple[str, str, str]]:
        return list(itertools.product(COLORS, SHAPES, BACKGROUNDS))


@dataclass
class Sample:
    pixels: np.ndarray          # (H, W, 3) float32, multiples of 1/255
    caption: str
    micro: MicroConditioning
    attributes: dict = field(default_factory=dict)


def caption_for(color: str, shape: str, background: str) -> str:
    return f"{color} {shape} {background}"


def caption_vocabulary() -> CaptionVocabulary:
    return CaptionVocabulary.from_words([*COLORS, *SHAPES, *BACKGROUNDS])


def _coverage(shape: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    s = SUPERSAMPLE
    ys = (np.arange(h * s) + 0.5) / s
    xs = (np.arange(w * s) + 0.5) / s
    y, x = np.meshgrid(ys, xs, indexing="ij")
    if shape == "circle":
        inside = (y - cy) ** 2 + (x - cx) ** 2 <= r * r
    elif shape == "square":
        half = 0.85 * r
        inside = (np.abs(y - cy) <= half) & (np.abs(x - cx) <= half)
    elif shape == "triangle":
        top, base = cy - r, cy + 0.8 * r
        # apex at (top, cx); base corners at (base, cx -/+ r)
        slope = r / (base - top)
        inside = (y <= base) & (y >= top) & (np.abs(x - cx) <= (y - top) * slope)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def render(shape: str, color: str, background: str, height: int, width: int,
           cy: float, cx: float, r: float) -> np.ndarray:
    cov = _coverage(shape, height, width, cy, cx, r)[..., None]
    bg = np.full(3, BACKGROUNDS[background])
    fg = np.array(COLORS[color])
    img = (1.0 - cov) * bg + cov * fg
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def quality_score(pixels: np.ndarray) -> float:
    """Ten times the RMS luminance contrast, rounded to 1e-4."""
    luma = pixels.astype(np.float64) @ _LUMA
    return round(float(luma.std()) * 10.0, 4)


def make_sample(rng: np.random.Generator, size: int, color: str, shape: str, background: str) -> Sample:
    orig_h = size + int(rng.integers(0, MAX_EXTRA + 1))
    orig_w = size + int(rng.integers(0, MAX_EXTRA + 1))
    top = int(rng.integers(0, orig_h - size + 1))
    left = int(rng.integers(0, orig_w - size + 1))
    r = float(rng.uniform(0.22, 0.34)) * size
    margin = 1.05 * r
    cy = top + float(rng.uniform(margin, size - margin))
    cx = left + float(rng.uniform(margin, size - margin))
    full = render(shape, color, background, orig_h, orig_w, cy, cx, r)
    pixels = np.ascontiguousarray(full[top:top + size, left:left + size])
    micro = MicroConditioning(float(orig_h), float(orig_w), float(top), float(left), quality_score(pixels))
    attrs = {"shape": shape, "color": color, "background": background,
             "center": (cy - top, cx - left), "radius": r}
    return Sample(pixels, caption_for(color, shape, background), micro, attrs)


def gen_dataset(spec: DatasetSpec, seed: int | None = None) -> list[Sample]:
    """Deterministic for a given seed. Attribute combinations cycle in a
    seeded order so every combination appears once per 18 samples."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    combos = DatasetSpec.combinations()
    samples = []
    order: list[int] = []
    for _ in range(spec.count):
        if not order:
            order = list(rng.permutation(len(combos)))
        color, shape, background = combos[order.pop()]
        samples.append(make_sample(rng, spec.image_size, color, shape, background))
    return samples


def style_image(size: int = 32, seed: int = 0) -> np.ndarray:
    """A diagonal-stripe pattern outside the shapes grammar; used as the
    single reference image for adapter fine-tuning."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size]
    period = 8
    phase = int(rng.integers(0, period))
    band = ((x + y + phase) // (period // 2)) % 2
    a = np.array([0.95, 0.75, 0.20])
    b = np.array([0.35, 0.10, 0.45])
    img = np.where(band[..., None] == 1, a, b)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)
