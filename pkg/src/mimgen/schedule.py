"""Masking schedules for decoding (how many tokens stay masked after step t)
and for training (what fraction of a token grid to hide)."""

from __future__ import annotations

import math

import numpy as np

SHAPES = ("cosine", "linear", "square")


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def mask_fraction(t: int, total: int, shape: str = "cosine") -> float:
    """Fraction of tokens still masked after ``t`` of ``total`` steps."""
    if total < 1:
        raise ValueError(f"total steps must be >= 1, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    # exact endpoints; cos(pi/2) is 6e-17 in floating point
    if t == 0:
        return 1.0
    if t == total:
        return 0.0
    r = t / total
    if shape == "cosine":
        return math.cos(r * math.pi / 2)
    if shape == "linear":
        return 1.0 - r
    if shape == "square":
        return (1.0 - r) ** 2
    raise ValueError(f"unknown schedule shape {shape!r}; expected one of {SHAPES}")


def masked_counts(n_tokens: int, total: int, shape: str = "cosine") -> list[int]:
    """Masked-token count after every step 0..total.

    ``floor(fraction * N)``, clamped so that each step commits at least one
    token while any remain; this guarantees termination in exactly ``total``
    steps even when N is small.
    """
    if n_tokens < 1:
        raise ValueError("need at least one token")
    counts = [n_tokens]
    for t in range(1, total + 1):
        base = math.floor(mask_fraction(t, total, shape) * n_tokens)
        counts.append(max(0, min(counts[-1] - 1, base)))
    counts[-1] = 0
    return counts


def masked_count(t: int, total: int, n_tokens: int, shape: str = "cosine") -> int:
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return masked_counts(n_tokens, total, shape)[t]


def entry_step(n_masked: int, n_tokens: int, total: int, shape: str = "cosine") -> int:
    """First decode step for a grid that starts with ``n_masked`` masked tokens.

    Decoding resumes at the earliest step whose scheduled count lies strictly
    below ``n_masked`` (the nearest count below it), so a fully masked grid
    enters at step 1 like plain generation. Returns ``total + 1`` when
    nothing is masked.
    """
    if n_masked <= 0:
        return total + 1
    counts = masked_counts(n_tokens, total, shape)
    for t in range(1, total + 1):
        if counts[t] < n_masked:
            return t
    return total


def sample_train_fraction(rng: np.random.Generator) -> float:
    """``cos(r * pi / 2)`` with ``r ~ U(0, 1)``."""
    r = rng.random()
    return math.cos(r * math.pi / 2)


def make_train_mask(n_tokens: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with ``max(1, round(fraction * N))`` positions set, or none
    when the fraction is exactly zero."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    mask = np.zeros(n_tokens, dtype=bool)
    if fraction == 0.0:
        return mask
    k = min(n_tokens, max(1, round_half_away(fraction * n_tokens)))
    mask[rng.choice(n_tokens, size=k, replace=False)] = True
    return mask
