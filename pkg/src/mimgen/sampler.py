"""Iterative parallel decoding.

Every step predicts all masked positions, optionally mixes conditional and
unconditional logits (classifier-free guidance), samples a token per
position, and commits the most confident ones so that exactly
``masked_counts[t]`` positions remain masked. Committed tokens are never
revisited.

Variation, inpainting and frame warping reuse the same loop, entering the
schedule part-way. The entry step for a grid with ``m`` masked tokens is the
first step whose scheduled count is strictly below ``m``
(:func:`mimgen.schedule.entry_step`).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import Condition, MaskedImageModel
from .numerics import no_grad
from .numerics.tensor import DimensionError
from .schedule import entry_step, masked_counts, round_half_away
from .vq import nearest_ids


@dataclass
class SamplerConfig:
    steps: int = 12
    guidance_scale: float = 3.0
    temperature: float = 1.0
    confidence_temperature: float = 1.0
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.temperature < 0 or self.guidance_scale < 0 or self.confidence_temperature < 0:
            raise ValueError("temperatures and guidance scale must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SamplerConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class MaskState:
    fixed: np.ndarray   # (B, N) bool
    ids: np.ndarray     # (B, N) int; MASK id wherever not fixed

    @property
    def masked(self) -> np.ndarray:
        return (~self.fixed).sum(axis=1)

    def copy(self) -> MaskState:
        return MaskState(self.fixed.copy(), self.ids.copy())


def guided_logits(cond: np.ndarray, uncond: np.ndarray, scale: float) -> np.ndarray:
    """``uncond + scale * (cond - uncond)``; exact at scale 0 and 1."""
    if cond.shape != uncond.shape:
        raise DimensionError(f"logit shapes differ: {cond.shape} vs {uncond.shape}")
    if scale == 1:
        return cond
    if scale == 0:
        return uncond
    return uncond + scale * (cond - uncond)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_tokens(logits: np.ndarray, temperature: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and their probabilities under ``softmax(logits / temperature)``.

    Temperature 0 is greedy and reports the plain softmax probability of the
    argmax. For positive temperatures the Gumbel-max trick draws the sample.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if temperature == 0:
        ids = np.argmax(logits, axis=-1)
        probs = _softmax(logits)
    else:
        scaled = logits / temperature
        ids = np.argmax(scaled + rng.gumbel(size=scaled.shape), axis=-1)
        probs = _softmax(scaled)
    conf = np.take_along_axis(probs, ids[..., None], axis=-1)[..., 0]
    return ids, conf


def select_to_fix(confidences: np.ndarray, fixed: np.ndarray, target_masked,
                  confidence_temperature: float, step: int, total: int,
                  rng: np.random.Generator) -> np.ndarray:
    """New fixed-flag array with exactly ``target_masked`` positions left masked.

    Scores are ``log(confidence) + tau_c * (1 - step/total) * gumbel`` over the
    currently masked positions; the highest scores are committed, ties going
    to the lowest linear index. Already fixed positions stay fixed.
    """
    conf = np.atleast_2d(confidences)
    fixed = np.atleast_2d(fixed)
    noise = rng.gumbel(size=conf.shape)
    scale = confidence_temperature * (1.0 - step / total)
    score = np.log(np.maximum(conf, 1e-300)) + scale * noise
    score = np.where(fixed, -np.inf, score)
    targets = np.broadcast_to(np.asarray(target_masked), (conf.shape[0],))
    out = fixed.copy()
    for row in range(conf.shape[0]):
        n_masked = int((~fixed[row]).sum())
        target = int(targets[row])
        if target > n_masked:
            raise ValueError(f"target {target} exceeds current masked count {n_masked}")
        n_fix = n_masked - target
        if n_fix:
            order = np.argsort(-score[row], kind="stable")
            out[row, order[:n_fix]] = True
    return out


StepHook = Callable[[int, MaskState], None]


def _logits(model: MaskedImageModel, ids: np.ndarray, cond: Condition, scale: float) -> np.ndarray:
    with no_grad():
        c = model(ids, cond).data
        if scale == 1:
            return c
        u = model(ids, cond, drop=np.ones(len(cond), dtype=bool)).data
    return guided_logits(c, u, scale)


def decode_loop(model: MaskedImageModel, state: MaskState, cond: Condition, config: SamplerConfig,
                start: int, rng: np.random.Generator, on_step: StepHook | None = None) -> MaskState:
    total = config.steps
    n = state.ids.shape[1]
    counts = masked_counts(n, total, config.schedule)
    mask_id = model.config.mask_id
    state = state.copy()
    for t in range(start, total + 1):
        logits = _logits(model, state.ids, cond, config.guidance_scale)
        sampled, conf = sample_tokens(logits, config.temperature, rng)
        target = np.minimum(counts[t], state.masked)
        new_fixed = select_to_fix(conf, state.fixed, target, config.confidence_temperature, t, total, rng)
        newly = new_fixed & ~state.fixed
        state.ids[newly] = sampled[newly]
        state.fixed = new_fixed
        if on_step is not None:
            on_step(t, state.copy())
    if (state.ids == mask_id).any():
        raise RuntimeError("decode loop ended with masked tokens")
    return state


def _grid(ids: np.ndarray, grid: int) -> np.ndarray:
    return ids.reshape(ids.shape[0], grid, grid)


def _flat(tokens: np.ndarray, n: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 2:
        tokens = tokens[None]
    flat = tokens.reshape(tokens.shape[0], -1)
    if flat.shape[1] != n:
        raise DimensionError(f"token grid has {flat.shape[1]} positions, model expects {n}")
    return flat


def generate(model: MaskedImageModel, cond: Condition, config: SamplerConfig,
             on_step: StepHook | None = None) -> np.ndarray:
    """Decode from an all-MASK grid; returns (B, grid, grid) ids."""
    n = model.config.n_tokens
    b = len(cond)
    state = MaskState(np.zeros((b, n), dtype=bool), np.full((b, n), model.config.mask_id, dtype=np.int64))
    rng = np.random.default_rng(config.seed)
    state = decode_loop(model, state, cond, config, 1, rng, on_step)
    return _grid(state.ids, model.config.grid)


def _resume(model, source_flat, masked, cond, config, on_step, rng=None):
    n = source_flat.shape[1]
    ids = np.where(masked, model.config.mask_id, source_flat)
    state = MaskState(~masked, ids)
    start = entry_step(int(masked.sum(axis=1).max()), n, config.steps, config.schedule)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    state = decode_loop(model, state, cond, config, start, rng, on_step)
    return _grid(state.ids, model.config.grid)


def vary(model: MaskedImageModel, source: np.ndarray, strength: float, cond: Condition,
         config: SamplerConfig, on_step: StepHook | None = None) -> np.ndarray:
    """Re-mask ``round(strength * N)`` random positions and decode them again."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength {strength} outside [0, 1]")
    n = model.config.n_tokens
    flat = _flat(source, n)
    k = round_half_away(strength * n)
    pick_rng = np.random.default_rng([config.seed, 1])
    masked = np.zeros(flat.shape, dtype=bool)
    for row in range(len(flat)):
        masked[row, pick_rng.choice(n, size=k, replace=False)] = True
    return _resume(model, flat, masked, cond, config, on_step)


def pixel_mask_to_tokens(pixel_mask: np.ndarray, grid: int, factor: int) -> np.ndarray:
    """A token is masked iff any pixel of its ``factor`` x ``factor`` patch is."""
    pm = np.asarray(pixel_mask, dtype=bool)
    if pm.shape != (grid * factor, grid * factor):
        raise DimensionError(f"pixel mask {pm.shape} != image extent {(grid * factor,) * 2}")
    return pm.reshape(grid, factor, grid, factor).any(axis=(1, 3))


def inpaint(model: MaskedImageModel, source: np.ndarray, pixel_mask: np.ndarray, cond: Condition,
            config: SamplerConfig, factor: int, on_step: StepHook | None = None) -> np.ndarray:
    n = model.config.n_tokens
    flat = _flat(source, n)
    tok = pixel_mask_to_tokens(pixel_mask, model.config.grid, factor).reshape(-1)
    masked = np.broadcast_to(tok, flat.shape).copy()
    return _resume(model, flat, masked, cond, config, on_step)


def warp_frame(tokens: np.ndarray, entries: np.ndarray, shift: tuple[float, float]):
    """Translate a token grid by ``shift = (dx, dy)`` in latent space.

    Tokens are looked up to codebook vectors, resampled bilinearly from
    ``(y - dy, x - dx)``, and snapped back to the nearest entry. Returns the
    new grid and a boolean grid of positions whose bilinear support reaches
    outside the source grid; those must be re-decoded.
    """
    tokens = np.asarray(tokens)
    h, w = tokens.shape
    dx, dy = shift
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError(f"shift {shift} too large for a {h}x{w} grid")
    vecs = np.asarray(entries, dtype=np.float64)[tokens]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sy, sx = ys - dy, xs - dx
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    out = np.zeros_like(vecs)
    outside = np.zeros((h, w), dtype=bool)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (1, 0, fy * (1 - fx)),
                        (0, 1, (1 - fy) * fx), (1, 1, fy * fx)):
        yy, xx = y0 + oy, x0 + ox
        used = wgt > 0
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        outside |= used & ~inside
        ok = used & inside
        out[ok] += wgt[ok][:, None] * vecs[yy[ok], xx[ok]]
    return nearest_ids(out, entries), outside


def dilate(mask: np.ndarray, width: int) -> np.ndarray:
    """Grow a boolean grid by ``width`` cells in Chebyshev distance."""
    out = mask.copy()
    h, w = mask.shape
    for y, x in zip(*np.nonzero(mask)):
        out[max(0, y - width):y + width + 1, max(0, x - width):x + width + 1] = True
    return out


def animate(model: MaskedImageModel, entries: np.ndarray, cond: Condition, frames: int,
            shift: tuple[float, float], config: SamplerConfig, refine_width: int = 1) -> list[np.ndarray]:
    """Frame 0 is a fresh generation; each later frame warps the previous one
    and re-decodes its warp boundary dilated by ``refine_width`` cells (the
    refinement window), entering the schedule late."""
    if frames < 1:
        raise ValueError("need at least one frame")
    if len(cond) != 1:
        raise DimensionError("animate decodes a single sequence")
    first = generate(model, cond, config)[0]
    out = [first]
    for k in range(1, frames):
        warped, remask = warp_frame(out[-1], entries, shift)
        window = dilate(remask, refine_width) if remask.any() else remask
        frame_cfg = dataclasses.replace(config, seed=config.seed + k)
        frame = _resume(model, warped.reshape(1, -1), window.reshape(1, -1), cond, frame_cfg, None)[0]
        out.append(frame)
    return out
