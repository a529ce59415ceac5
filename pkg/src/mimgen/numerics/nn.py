"""Parameters, a small module tree, and the layers the models are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters carry no gradient."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(np.array(data, dtype=get_default_dtype()), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag
        if not flag:
            self.grad = None


class Module:
    """Attribute-walking container: parameters and submodules are discovered
    in assignment order, giving stable dotted names."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._children():
            name = prefix + key
            if isinstance(val, Parameter):
                val.name = name
                yield name, val
            else:
                yield from val.named_parameters(name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix.rstrip("."), self
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_modules(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def count_params(self, trainable_only: bool = True) -> int:
        return sum(p.data.size for p in self.parameters() if p.trainable or not trainable_only)

    def freeze(self) -> Module:
        for p in self.parameters():
            p.set_trainable(False)
        return self

    def unfreeze(self) -> Module:
        for p in self.parameters():
            p.set_trainable(True)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.data.shape != arr.shape:
                raise T.DimensionError(f"{name}: shape {arr.shape} != {p.data.shape}")
            # stored float precision wins so a float64 round trip stays exact
            p.data = np.array(arr, dtype=arr.dtype if arr.dtype.kind == "f" else p.data.dtype)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    """``y = x W^T + b`` with W stored (out, in).

    ``lora`` and ``quant`` are attachment slots filled by the fine-tuning and
    quantization passes respectively.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False):
        w = np.zeros((d_out, d_in)) if zero_init else _normal(rng, (d_out, d_in), d_in ** -0.5)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out
        self.lora = None
        self.quant = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.quant is not None:
            return self.quant.apply(x)
        if self.lora is None:
            return T.linear(x, self.weight, self.bias)
        y = T.linear(x, self.weight) + self.lora(x)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = T.LAYER_NORM_EPS):
        self.gain = Parameter(np.ones(dim)) if affine else None
        self.bias = Parameter(np.zeros(dim)) if affine else None
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, zero_init: bool = False):
        shape = (kernel, kernel, c_in, c_out)
        w = np.zeros(shape) if zero_init else _normal(rng, shape, (kernel * kernel * c_in) ** -0.5)
        self.kernel = Parameter(w)
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias, self.stride)


class Embedding(Module):
    def __init__(self, rows: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.table = Parameter(_normal(rng, (rows, dim), std))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.take(self.table, ids)
