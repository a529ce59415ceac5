"""Masked-token pre-training with gradient accumulation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from ..backbone import Condition, MaskedImageModel
from ..numerics import Tensor, log_softmax, mul, pick, tsum
from ..numerics.optim import Adam
from ..numerics.tensor import NumericError
from ..schedule import make_train_mask, sample_train_fraction
from ..vq import TrainingDiverged, VqModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    grad_accum: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cond_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch size and accumulation steps must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def masked_ce_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                   normalizer: float | None = None) -> Tensor:
    """Cross-entropy summed over masked positions, divided by ``normalizer``
    (default: the number of masked positions). No masked positions -> 0."""
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ValueError("logits, targets and mask disagree in shape")
    if targets.size and targets.max() >= logits.shape[-1]:
        raise ValueError("target id outside the logit vocabulary")
    count = float(mask.sum()) if normalizer is None else float(normalizer)
    weights = mask.astype(logits.dtype) / max(count, 1.0)
    nll = pick(log_softmax(logits), targets)
    return tsum(mul(nll, -weights))


@dataclass
class Batch:
    tokens: np.ndarray    # (B, N) target codebook ids
    captions: np.ndarray  # (B, L)
    micro: np.ndarray     # (B, 5)

    def __len__(self) -> int:
        return len(self.tokens)

    def select(self, idx) -> Batch:
        return Batch(self.tokens[idx], self.captions[idx], self.micro[idx])

    @classmethod
    def from_images(cls, vq: VqModel, images: np.ndarray, captions: np.ndarray, micro: np.ndarray) -> Batch:
        ids = vq.tokenize(images)
        return cls(ids.reshape(len(ids), -1), np.asarray(captions), np.asarray(micro))


def train_step(model: MaskedImageModel, batch: Batch, optimizer: Adam, config: TrainConfig,
               rng: np.random.Generator, step: int = 0) -> dict:
    """One optimizer update over an effective batch.

    Masks and condition-dropout flags for the whole effective batch are drawn
    first, in item order, so splitting into ``grad_accum`` micro-batches does
    not change the random stream or the loss normalization (mean over every
    masked position of the effective batch).
    """
    n = batch.tokens.shape[1]
    masks = np.stack([make_train_mask(n, sample_train_fraction(rng), rng) for _ in range(len(batch))])
    drops = rng.random(len(batch)) < config.cond_dropout
    inputs = np.where(masks, model.config.mask_id, batch.tokens)
    total_masked = int(masks.sum())

    optimizer.zero_grad()
    loss_value = 0.0
    correct = 0
    chunks = np.array_split(np.arange(len(batch)), config.grad_accum)
    for idx in chunks:
        if len(idx) == 0:
            continue
        logits = model(inputs[idx], Condition(batch.captions[idx], batch.micro[idx]), drop=drops[idx])
        try:
            loss = masked_ce_loss(logits, batch.tokens[idx], masks[idx], normalizer=total_masked)
            value = float(loss.data)
        except NumericError:
            value = float("nan")
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"masked CE became {value} at step {step} (micro-batch {idx.tolist()}, "
                f"masked={int(masks[idx].sum())}, non-finite logits="
                f"{int((~np.isfinite(logits.data)).sum())}/{logits.data.size})")
        loss.backward()
        loss_value += value
        pred = logits.data.argmax(axis=-1)
        correct += int(((pred == batch.tokens[idx]) & masks[idx]).sum())
    optimizer.step()
    return {"loss": loss_value, "accuracy": correct / max(total_masked, 1), "masked": total_masked}


def evaluate_masked_ce(model: MaskedImageModel, batch: Batch, fractions=(0.25, 0.5, 0.75, 1.0),
                       repeats: int = 4, seed: int = 1234) -> float:
    """Mean masked CE over a fixed, seeded set of masks; no condition dropout."""
    from ..numerics import no_grad

    rng = np.random.default_rng(seed)
    n = batch.tokens.shape[1]
    losses = []
    with no_grad():
        for frac in fractions:
            for _ in range(repeats):
                masks = np.stack([make_train_mask(n, frac, rng) for _ in range(len(batch))])
                inputs = np.where(masks, model.config.mask_id, batch.tokens)
                logits = model(inputs, Condition(batch.captions, batch.micro))
                losses.append(float(masked_ce_loss(logits, batch.tokens, masks).data))
    return float(np.mean(losses))


class Trainer:
    """Owns the optimizer, the data stream and the random state of a run."""

    def __init__(self, model: MaskedImageModel, data: Batch, config: TrainConfig,
                 optimizer: Adam | None = None, rng: np.random.Generator | None = None, step: int = 0):
        self.model = model
        self.data = data
        self.config = config
        self.optimizer = optimizer or Adam(model.trainable_parameters(), lr=config.lr,
                                           betas=(config.beta1, config.beta2), eps=config.eps)
        self.rng = rng or np.random.default_rng(config.seed)
        self.step = step
        self.history: list[dict] = []

    def next_batch(self) -> Batch:
        m = len(self.data)
        eff = self.config.effective_batch
        idx = self.rng.choice(m, size=eff, replace=m < eff)
        return self.data.select(idx)

    def run(self, steps: int | None = None, callback=None) -> list[dict]:
        steps = self.config.steps if steps is None else steps
        for _ in range(steps):
            metrics = train_step(self.model, self.next_batch(), self.optimizer, self.config,
                                 self.rng, self.step)
            metrics["step"] = self.step
            self.history.append(metrics)
            if callback is not None:
                callback(metrics)
            if self.step % 100 == 0:
                log.info("step %d loss %.4f acc %.3f", self.step, metrics["loss"], metrics["accuracy"])
            self.step += 1
        return self.history
