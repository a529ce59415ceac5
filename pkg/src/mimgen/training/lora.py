"""Low-rank adapters on the attention Q/K/V projections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..numerics import Linear, Module, Parameter, Tensor, linear
from ..numerics.tensor import ConfigError

QKV_TARGETS = ("q", "k", "v", "cross_q", "cross_k", "cross_v")


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    targets: tuple[str, ...] = QKV_TARGETS
    init_std: float = 0.01

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        self.targets = tuple(self.targets)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LoraConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class LoraAdapter(Module):
    """Adds ``scaling * x A^T B^T``; B starts at zero so the delta does too."""

    def __init__(self, d_in: int, d_out: int, config: LoraConfig, rng: np.random.Generator):
        self.A = Parameter(rng.normal(0.0, config.init_std, size=(config.rank, d_in)))
        self.B = Parameter(np.zeros((d_out, config.rank)))
        self.scaling = config.scaling

    def __call__(self, x: Tensor) -> Tensor:
        return linear(linear(x, self.A), self.B) * self.scaling

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)


def _targets(model: Module, config: LoraConfig) -> list[tuple[str, Linear]]:
    found = []
    for i, block in enumerate(model.blocks):
        for t in config.targets:
            lin = getattr(block, t, None)
            if not isinstance(lin, Linear):
                raise ConfigError(f"LoRA target {t!r} missing from block {i}")
            found.append((f"blocks.{i}.{t}", lin))
    return found


def attach_lora(model: Module, config: LoraConfig, rng: np.random.Generator | None = None) -> list[str]:
    """Freeze the whole model and attach trainable adapters to each target."""
    rng = np.random.default_rng(0) if rng is None else rng
    targets = _targets(model, config)
    if any(lin.lora is not None for _, lin in targets):
        raise ConfigError("adapters already attached")
    if any(lin.quant is not None for _, lin in targets):
        raise ConfigError("cannot attach adapters to quantized layers")
    model.freeze()
    for _, lin in targets:
        lin.lora = LoraAdapter(lin.d_in, lin.d_out, config, rng)
    model.lora_config = config
    return [name for name, _ in targets]


def merge_lora(model: Module) -> int:
    """Fold every adapter into its base weight and drop it. Returns the number
    of merged layers (0 when none are attached)."""
    merged = 0
    for _, mod in model.named_modules():
        if isinstance(mod, Linear) and mod.lora is not None:
            mod.weight.data = (mod.weight.data + mod.lora.delta()).astype(mod.weight.dtype)
            mod.lora = None
            merged += 1
    if merged:
        model.lora_config = None
    return merged


def lora_param_count(model: Module) -> int:
    return sum(p.data.size for name, p in model.named_parameters() if ".lora." in name and p.trainable)
