"""U-ViT-lite token predictor.

Token grid (with a reserved MASK id) -> embeddings + learned 2-D positions ->
conv residual blocks -> [optional stride-2 down] -> transformer core
(self-attention with FiLM, cross-attention to the caption, MLP) ->
[optional 2x up + skip] -> conv residual blocks -> logits over the codebook.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import conditioning as C
from .numerics import (
    Conv2d,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    attention,
    gelu,
    silu,
    upsample2x,
)
from .numerics.tensor import ConfigError, DimensionError


@dataclass
class ModelConfig:
    vocab_size: int = 256
    grid: int = 8
    dim: int = 128
    heads: int = 4
    depth: int = 4
    conv_blocks: int = 1
    downsample: bool = False
    cond_dim: int = 64
    micro_dim: int = 8
    caption_vocab_size: int = 10
    max_caption_len: int = 4
    mlp_ratio: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.downsample and self.grid % 2:
            raise ConfigError(f"downsample requires an even grid, got {self.grid}")
        if self.micro_dim % 2:
            raise ConfigError("micro_dim must be even")
        if min(self.grid, self.depth, self.heads, self.max_caption_len) < 1 or self.conv_blocks < 0:
            raise ConfigError("grid, depth, heads and max_caption_len must be positive")

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Condition:
    """Per-sample caption ids (B, L) and raw micro-conditioning scalars (B, 5)."""

    captions: np.ndarray
    micro: np.ndarray = field(default=None)

    def __post_init__(self):
        self.captions = np.atleast_2d(np.asarray(self.captions, dtype=np.int64))
        if self.micro is None:
            self.micro = np.zeros((len(self.captions), C.N_MICRO))
        self.micro = np.atleast_2d(np.asarray(self.micro, dtype=np.float64))
        if len(self.micro) != len(self.captions):
            raise DimensionError("captions and micro records disagree on batch size")

    def __len__(self) -> int:
        return len(self.captions)

    def repeat(self, n: int) -> Condition:
        return Condition(np.repeat(self.captions, n, axis=0), np.repeat(self.micro, n, axis=0))


class ResBlock(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.conv1 = Conv2d(dim, dim, 3, rng)
        self.conv2 = Conv2d(dim, dim, 3, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return h + self.conv2(silu(self.conv1(silu(self.norm(h)))))


class TransformerBlock(Module):
    def __init__(self, dim: int, cond_dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.norm_cross = LayerNorm(dim)
        self.cross_q = Linear(dim, dim, rng)
        self.cross_k = Linear(cond_dim, dim, rng)
        self.cross_v = Linear(cond_dim, dim, rng)
        self.cross_o = Linear(dim, dim, rng)
        self.norm_mlp = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def __call__(self, h: Tensor, cond: C.ConditioningBundle, gamma: Tensor, beta: Tensor) -> Tensor:
        x = C.modulate(h, gamma, beta)
        h = h + self.o(attention(self.q(x), self.k(x), self.v(x), self.heads))
        x = self.norm_cross(h)
        ctx = cond.sequence
        h = h + self.cross_o(attention(self.cross_q(x), self.cross_k(ctx), self.cross_v(ctx),
                                       self.heads, key_mask=cond.key_mask))
        x = self.norm_mlp(h)
        return h + self.fc2(gelu(self.fc1(x)))


class MaskedImageModel(Module):
    """Predicts codebook logits at every grid position.

    ``forward_count`` tallies backbone evaluations; the sampler and benchmark
    rely on it for accounting.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.dim
        self.caption = C.CaptionEmbedder(config.caption_vocab_size, config.cond_dim,
                                         config.max_caption_len, rng)
        self.token_embed = Embedding(config.vocab_size + 1, d, rng)
        self.positions = Parameter(rng.normal(0.0, 0.02, size=(config.n_tokens, d)))
        self.conv_in = [ResBlock(d, rng) for _ in range(config.conv_blocks)]
        if config.downsample:
            self.down = Conv2d(d, d, 3, rng, stride=2)
        self.blocks = [TransformerBlock(d, config.cond_dim, config.heads, config.mlp_ratio, rng)
                       for _ in range(config.depth)]
        if config.downsample:
            self.up = Conv2d(d, d, 3, rng)
        self.conv_out = [ResBlock(d, rng) for _ in range(config.conv_blocks)]
        self.film = C.FilmHeads(config.cond_dim + C.N_MICRO * config.micro_dim, d, config.depth, rng)
        self.norm_out = LayerNorm(d)
        self.head = Linear(d, config.vocab_size, rng)
        self.forward_count = 0
        self.last_sequence_length = 0

    def condition(self, cond: Condition, drop: np.ndarray | None = None) -> C.ConditioningBundle:
        captions = cond.captions
        if drop is not None and np.any(drop):
            captions = captions.copy()
            null = np.full(captions.shape[1], self.caption.pad_id)
            null[0] = self.caption.null_id
            captions[np.asarray(drop, dtype=bool)] = null
        bundle = self.caption(captions)
        bundle.micro = C.build_micro(cond.micro, self.config.micro_dim)
        return bundle

    def __call__(self, ids: np.ndarray, cond: Condition, drop: np.ndarray | None = None) -> Tensor:
        return forward(self, ids, cond, drop)


def build_model(config: ModelConfig) -> MaskedImageModel:
    return MaskedImageModel(config)


def forward(model: MaskedImageModel, ids: np.ndarray, cond: Condition,
            drop: np.ndarray | None = None) -> Tensor:
    """Logits (B, N, V) for a (B, N) id batch where ``V`` marks MASK."""
    cfg = model.config
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    bsz, n = ids.shape
    if n != cfg.n_tokens:
        raise DimensionError(f"expected {cfg.n_tokens} tokens per grid, got {n}")
    if len(cond) != bsz:
        raise DimensionError(f"condition batch {len(cond)} != token batch {bsz}")
    if ids.min() < 0 or ids.max() > cfg.mask_id:
        raise ValueError(f"token ids must lie in [0, {cfg.mask_id}]")
    model.forward_count += 1

    bundle = model.condition(cond, drop)
    films = C.film_params(model.film, bundle.film_input())

    g, d = cfg.grid, cfg.dim
    h = model.token_embed(ids) + model.positions
    h = h.reshape(bsz, g, g, d)
    for blk in model.conv_in:
        h = blk(h)
    skip = h
    if cfg.downsample:
        h = model.down(h)
    side = h.shape[1]
    h = h.reshape(bsz, side * side, d)
    model.last_sequence_length = side * side
    for blk, (gamma, beta) in zip(model.blocks, films):
        h = blk(h, bundle, gamma, beta)
    h = h.reshape(bsz, side, side, d)
    if cfg.downsample:
        h = model.up(upsample2x(h)) + skip
    for blk in model.conv_out:
        h = blk(h)
    h = model.norm_out(h.reshape(bsz, n, d))
    return model.head(h)


def count_params(model: Module) -> int:
    return model.count_params(trainable_only=True)
