"""Caption and micro-conditioning inputs to the backbone.

A trainable caption embedder stands in for a pretrained text encoder. It
produces a per-token sequence (consumed by cross-attention) and a pooled
vector; sinusoidal embeddings of the micro-conditioning scalars are appended
to the pooled vector, and the result drives per-block FiLM modulation.
"""

from __future__ import annotations

import json
from dataclasses import astuple, dataclass

import numpy as np

from .numerics import Linear, Module, Parameter, Tensor, concat, layer_norm, mul, take, tsum
from .numerics.tensor import ConfigError

PAD = "<pad>"
NULL = "<null>"
SINUSOID_BASE = 10000.0
N_MICRO = 5


class VocabularyError(KeyError):
    pass


class CaptionVocabulary:
    """Word -> id map with dense ids. PAD is 0 and NULL (unconditional) is 1."""

    def __init__(self, tokens: dict[str, int]):
        ids = sorted(tokens.values())
        if ids != list(range(len(ids))):
            raise VocabularyError("vocabulary ids must be dense from 0")
        if tokens.get(PAD) is None or tokens.get(NULL) is None:
            raise VocabularyError("vocabulary needs PAD and NULL entries")
        self.tokens = dict(tokens)
        self.pad_id = tokens[PAD]
        self.null_id = tokens[NULL]

    @classmethod
    def from_words(cls, words) -> CaptionVocabulary:
        tokens = {PAD: 0, NULL: 1}
        for w in words:
            tokens.setdefault(w, len(tokens))
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, caption: str, max_len: int) -> np.ndarray:
        words = caption.split()
        if not words:
            raise VocabularyError("empty caption")
        if len(words) > max_len:
            raise VocabularyError(f"caption longer than {max_len} tokens: {caption!r}")
        try:
            ids = [self.tokens[w] for w in words]
        except KeyError as e:
            raise VocabularyError(f"unknown caption token {e.args[0]!r}") from None
        return np.array(ids + [self.pad_id] * (max_len - len(ids)), dtype=np.int64)

    def null_caption(self, max_len: int) -> np.ndarray:
        return np.array([self.null_id] + [self.pad_id] * (max_len - 1), dtype=np.int64)

    def decode(self, ids) -> str:
        inv = {v: k for k, v in self.tokens.items()}
        return " ".join(inv[int(i)] for i in ids if int(i) != self.pad_id)

    def to_json(self) -> str:
        return json.dumps(self.tokens, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> CaptionVocabulary:
        return cls({k: int(v) for k, v in json.loads(text).items()})


@dataclass(frozen=True)
class MicroConditioning:
    orig_height: float
    orig_width: float
    crop_top: float
    crop_left: float
    quality: float

    def __post_init__(self):
        if min(self.orig_height, self.orig_width, self.crop_top, self.crop_left) < 0:
            raise ValueError("micro-conditioning extents must be non-negative")
        if self.crop_top > self.orig_height or self.crop_left > self.orig_width:
            raise ValueError("crop origin lies outside the original image")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


@dataclass
class ConditioningBundle:
    sequence: Tensor        # (B, L, dc) cross-attention stream
    key_mask: np.ndarray    # (B, L) True at non-PAD positions
    pooled: Tensor          # (B, dc)
    micro: np.ndarray | None = None  # (B, 5 * per_scalar_dim)

    def film_input(self) -> Tensor:
        if self.micro is None:
            return self.pooled
        return concat([self.pooled, Tensor(self.micro.astype(self.pooled.dtype))], axis=-1)


def sinusoidal_embed(value, dim: int) -> np.ndarray:
    """``[sin(w_k v)..., cos(w_k v)...]`` with ``w_k = 10000^(-2k/dim)``.

    ``value`` may be a scalar or an array; the embedding is appended as a
    trailing axis.
    """
    if dim % 2:
        raise ConfigError(f"sinusoidal embedding dim must be even, got {dim}")
    k = np.arange(dim // 2, dtype=np.float64)
    omega = SINUSOID_BASE ** (-2.0 * k / dim)
    angles = np.asarray(value, dtype=np.float64)[..., None] * omega
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def build_micro(micro, per_scalar_dim: int) -> np.ndarray:
    """Concatenate the sinusoidal embeddings of the five micro scalars.

    Accepts a :class:`MicroConditioning` or an array whose last axis holds the
    five raw values (pixel units, not normalized).
    """
    arr = micro.as_array() if isinstance(micro, MicroConditioning) else np.asarray(micro, dtype=np.float64)
    if arr.shape[-1] != N_MICRO:
        raise ValueError(f"expected {N_MICRO} micro scalars, got {arr.shape[-1]}")
    emb = sinusoidal_embed(arr, per_scalar_dim)  # (..., 5, dim)
    return emb.reshape(*arr.shape[:-1], N_MICRO * per_scalar_dim)


class CaptionEmbedder(Module):
    """Learned token table plus positional offsets; pooled = masked mean."""

    def __init__(self, vocab_size: int, dim: int, max_len: int, rng: np.random.Generator,
                 pad_id: int = 0, null_id: int = 1):
        self.tokens = Parameter(rng.normal(0.0, 1.0, size=(vocab_size, dim)))
        self.positions = Parameter(rng.normal(0.0, 0.02, size=(max_len, dim)))
        self.pad_id, self.null_id = pad_id, null_id
        self.max_len = max_len

    def __call__(self, ids: np.ndarray) -> ConditioningBundle:
        return embed_caption(self, ids)


def embed_caption(embedder: CaptionEmbedder, ids: np.ndarray) -> ConditioningBundle:
    """Embed a (B, L) batch of caption ids.

    NULL tokens get no positional offset, so the NULL caption maps to exactly
    the learned unconditional row in both streams.
    """
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    if ids.shape[1] > embedder.max_len:
        raise VocabularyError(f"caption length {ids.shape[1]} exceeds {embedder.max_len}")
    if ids.min() < 0 or ids.max() >= embedder.tokens.shape[0]:
        raise VocabularyError("caption id out of vocabulary range")
    valid = ids != embedder.pad_id
    if not valid.any(axis=1).all():
        raise VocabularyError("all-PAD caption")
    tok = take(embedder.tokens, ids)
    use_pos = (valid & (ids != embedder.null_id))[..., None].astype(tok.dtype)
    pos = embedder.positions[: ids.shape[1]]
    seq = tok + mul(pos, use_pos)
    weights = valid / valid.sum(axis=1, keepdims=True)
    pooled = tsum(mul(tok, weights[..., None].astype(tok.dtype)), axis=1)
    return ConditioningBundle(sequence=seq, key_mask=valid, pooled=pooled)


def drop_condition(ids: np.ndarray, p: float, rng: np.random.Generator, null_caption: np.ndarray):
    """Replace each caption by the NULL caption with probability ``p``.

    Works on id batches before embedding; micro channels are untouched by
    construction. Returns ``(ids, dropped)``.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability {p} outside [0, 1]")
    ids = np.atleast_2d(np.asarray(ids))
    dropped = rng.random(ids.shape[0]) < p
    out = ids.copy()
    out[dropped] = null_caption
    return out, dropped


class FilmHeads(Module):
    """Zero-initialized projections from the pooled+micro vector to one
    (gamma, beta) pair per adaptive-norm site."""

    def __init__(self, cond_in: int, dim: int, sites: int, rng: np.random.Generator):
        self.gamma = [Linear(cond_in, dim, rng, zero_init=True) for _ in range(sites)]
        self.beta = [Linear(cond_in, dim, rng, zero_init=True) for _ in range(sites)]


def film_params(heads: FilmHeads, vec: Tensor) -> list[tuple[Tensor, Tensor]]:
    return [(g(vec) + 1.0, b(vec)) for g, b in zip(heads.gamma, heads.beta)]


def modulate(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``gamma * layer_norm(h) + beta`` with per-sample (B, d) gamma/beta."""
    b, d = gamma.shape
    return layer_norm(h) * gamma.reshape(b, 1, d) + beta.reshape(b, 1, d)
