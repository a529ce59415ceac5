"""Convolutional VQ autoencoder.

Images (B, H, W, 3) in [0, 1] are encoded to a continuous (B, H/f, W/f, D)
field, snapped to the nearest codebook entry, and decoded back to pixels.
Training uses reconstruction + codebook + commitment terms with a
straight-through estimator; there are no self-attention layers.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from .numerics import Conv2d, Module, Parameter, Tensor, no_grad, silu, take, upsample2x
from .numerics.optim import Adam
from .numerics.tensor import ConfigError, NumericError

log = logging.getLogger(__name__)


@dataclass
class VqConfig:
    vocab_size: int = 256
    dim: int = 16
    downsample: int = 4
    hidden: int = 32
    beta: float = 0.25
    lr: float = 2e-3
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("codebook needs at least 2 entries")
        f = self.downsample
        if f < 2 or f & (f - 1):
            raise ConfigError(f"downsample factor must be a power of 2 >= 2, got {f}")
        if self.beta <= 0:
            raise ConfigError("commitment weight must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> VqConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Codebook(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.entries = Parameter(rng.normal(0.0, 1.0, size=(vocab_size, dim)))

    @property
    def vocab_size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def init_from(self, field: np.ndarray, rng: np.random.Generator) -> None:
        """Reset entries to randomly chosen field vectors plus small jitter."""
        vecs = field.reshape(-1, self.dim)
        pick = rng.choice(len(vecs), size=self.vocab_size, replace=len(vecs) < self.vocab_size)
        jitter = rng.normal(0.0, 1e-2 * float(vecs.std()) + 1e-6, size=(self.vocab_size, self.dim))
        self.entries.data = (vecs[pick] + jitter).astype(self.entries.dtype)

    def lookup(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"token id outside [0, {self.vocab_size})")
        return self.entries.data[ids]


def nearest_ids(vectors: np.ndarray, entries: np.ndarray, chunk: int = 1 << 22) -> np.ndarray:
    """Index of the nearest entry (squared Euclidean) for each vector.

    Distances are formed from explicit differences in float64 so exact ties
    stay exact; ``argmin`` then picks the lowest index.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    entries = np.asarray(entries, dtype=np.float64)
    flat = vectors.reshape(-1, entries.shape[1])
    out = np.empty(len(flat), dtype=np.int64)
    step = max(1, chunk // max(1, entries.size))
    for s in range(0, len(flat), step):
        diff = flat[s:s + step, None, :] - entries[None, :, :]
        out[s:s + step] = np.argmin((diff * diff).sum(axis=-1), axis=1)
    return out.reshape(vectors.shape[:-1])


def quantize(field: Tensor, codebook: Codebook) -> tuple[np.ndarray, Tensor, Tensor]:
    """Snap a (..., D) field to the codebook.

    Returns ``(ids, selected, straight_through)``: ``selected`` carries
    gradient to the codebook entries, ``straight_through`` has the values of
    ``selected`` but passes its gradient to ``field`` unchanged.
    """
    if field.shape[-1] != codebook.dim:
        raise ValueError(f"field dim {field.shape[-1]} != codebook dim {codebook.dim}")
    ids = nearest_ids(field.data, codebook.entries.data)
    selected = take(codebook.entries, ids)
    straight = field + (selected.detach() - field.detach())
    return ids, selected, straight


class VqModel(Module):
    def __init__(self, config: VqConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c, d = config.hidden, config.dim
        levels = int(math.log2(config.downsample))
        self.enc_in = Conv2d(3, c, 3, rng)
        self.enc_down = [Conv2d(c, c, 3, rng, stride=2) for _ in range(levels)]
        self.enc_out = Conv2d(c, d, 1, rng)
        self.codebook = Codebook(config.vocab_size, d, rng)
        self.dec_in = Conv2d(d, c, 1, rng)
        self.dec_up = [Conv2d(c, c, 3, rng) for _ in range(levels)]
        self.dec_out = Conv2d(c, 3, 3, rng)

    @property
    def factor(self) -> int:
        return self.config.downsample

    def encode(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.enc_in.kernel.dtype))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        h, w = x.shape[1:3]
        f = self.factor
        if h % f or w % f:
            raise ConfigError(f"image extent {h}x{w} not divisible by downsample factor {f}")
        x = self.enc_in(x)
        for conv in self.enc_down:
            x = conv(silu(x))
        return self.enc_out(silu(x))

    def decode_field(self, field: Tensor) -> Tensor:
        x = self.dec_in(field)
        for conv in self.dec_up:
            x = conv(upsample2x(silu(x)))
        return self.dec_out(silu(x))

    def tokenize(self, images) -> np.ndarray:
        with no_grad():
            return nearest_ids(self.encode(images).data, self.codebook.entries.data)

    def decode(self, ids) -> np.ndarray:
        """Pixels in [0, 1] for a (h, w) or (B, h, w) id grid."""
        ids = np.asarray(ids)
        single = ids.ndim == 2
        if single:
            ids = ids[None]
        vecs = self.codebook.lookup(ids)
        with no_grad():
            img = self.decode_field(Tensor(vecs)).data
        img = np.clip(img, 0.0, 1.0)
        return img[0] if single else img


def encode(model: VqModel, images) -> Tensor:
    return model.encode(images)


def decode(model: VqModel, ids) -> np.ndarray:
    return model.decode(ids)


def vq_loss(image: Tensor, recon: Tensor, field: Tensor, selected: Tensor,
            beta: float = 0.25) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """``(total, reconstruction, codebook, commitment)``; every term is a mean
    of squared errors.

    The codebook term stops gradient into the field and the commitment term
    stops gradient into the entries.
    """
    diff = recon - image
    rec = (diff * diff).mean()
    cb_diff = selected - field.detach()
    cb = (cb_diff * cb_diff).mean()
    cm_diff = field - selected.detach()
    commit = (cm_diff * cm_diff).mean() * beta
    return rec + cb + commit, rec, cb, commit


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class VqTrainResult:
    model: VqModel
    losses: list[float]
    usage: np.ndarray

    @property
    def dead_codes(self) -> int:
        return int((self.usage == 0).sum())


def smooth(values, alpha: float = 0.05) -> np.ndarray:
    """Exponential moving average, seeded with the first value."""
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else (1 - alpha) * acc + alpha * v
        out[i] = acc
    return out


def train_vq(images: np.ndarray, config: VqConfig, callback=None) -> VqTrainResult:
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("empty dataset")
    model = VqModel(config)
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(model.trainable_parameters(), lr=config.lr)
    losses = []
    bs = min(config.batch_size, len(images))
    for step in range(config.steps):
        idx = rng.choice(len(images), size=bs, replace=False)
        x = Tensor(images[idx])
        z = model.encode(x)
        if step == 0:
            model.codebook.init_from(z.data, rng)
        _, selected, straight = quantize(z, model.codebook)
        recon = model.decode_field(straight)
        total, rec, cb, cm = vq_loss(x, recon, z, selected, config.beta)
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"VQ loss became {value} at step {step} (rec={float(rec.data)}, "
                f"codebook={float(cb.data)}, commit={float(cm.data)})")
        opt.zero_grad()
        total.backward()
        opt.step()
        losses.append(value)
        if callback is not None:
            callback(step, value)
        if step % 200 == 0:
            log.info("vq step %d loss %.5f", step, value)
    usage = np.bincount(model.tokenize(images).reshape(-1), minlength=config.vocab_size)
    model.freeze()
    return VqTrainResult(model=model, losses=losses, usage=usage)
