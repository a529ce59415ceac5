"""Post-training int8 weight quantization for transformer projections.

Symmetric per-output-row absmax: ``scale_i = max_j |W_ij| / 127`` and
``q_ij = round_half_away(W_ij / scale_i)``. All-zero rows get scale 1.
Inference dequantizes on the fly; biases, embeddings, norms and convolutions
stay in full precision.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Linear, Module, Parameter, Tensor, linear

DEFAULT_TARGETS = re.compile(r"^blocks\.\d+\.(q|k|v|o|cross_q|cross_k|cross_v|cross_o|fc1|fc2)$")


class QuantizationError(RuntimeError):
    pass


@dataclass
class QuantizedLinear:
    q: np.ndarray          # (out, in) int8 in [-127, 127]
    scale: np.ndarray      # (out,) float32
    bias: Parameter | None = None

    def dequantized(self) -> np.ndarray:
        return self.q.astype(self.scale.dtype) * self.scale[:, None]

    def apply(self, x: Tensor) -> Tensor:
        return dequant_matmul(x, self)

    @property
    def nbytes(self) -> int:
        return self.q.nbytes + self.scale.nbytes


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_linear(weight: np.ndarray, bias: Parameter | None = None) -> QuantizedLinear:
    w = np.asarray(weight)
    if not np.isfinite(w).all():
        raise QuantizationError("cannot quantize non-finite weights")
    dtype = w.dtype if w.dtype.kind == "f" else np.dtype(np.float32)
    rowmax = np.abs(w).max(axis=1)
    scale = np.where(rowmax > 0, rowmax / 127.0, 1.0).astype(dtype)
    q = _round_half_away(w.astype(np.float64) / scale.astype(np.float64)[:, None])
    return QuantizedLinear(np.clip(q, -127, 127).astype(np.int8), scale, bias)


def dequant_matmul(x: Tensor, ql: QuantizedLinear) -> Tensor:
    """``x @ dequant(q)^T + bias``; gradients flow to ``x`` and the bias only."""
    return linear(x, Tensor(ql.dequantized()), ql.bias)


def _default_filter(name: str) -> bool:
    return DEFAULT_TARGETS.match(name) is not None


def target_linears(model: Module, target: Callable[[str], bool] = _default_filter) -> list[tuple[str, Linear]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, Linear) and target(n)]


def quantize_model(model: Module, target: Callable[[str], bool] = _default_filter) -> dict:
    """Replace targeted linear weights with int8 + per-row scales, in place.

    Returns a size report. Raises if the model is already quantized or still
    carries unmerged adapters.
    """
    layers = target_linears(model, target)
    if not layers:
        raise QuantizationError("no layers matched the quantization target filter")
    if any(lin.quant is not None for _, lin in layers):
        raise QuantizationError("model is already quantized")
    if any(lin.lora is not None for _, lin in layers):
        raise QuantizationError("merge adapters before quantizing")
    before = after = 0
    names = []
    for name, lin in layers:
        before += lin.weight.data.nbytes
        lin.quant = quantize_linear(lin.weight.data, lin.bias)
        lin.weight = None
        after += lin.quant.nbytes
        names.append(name)
    return {
        "layers": names,
        "bytes_before": int(before),
        "bytes_after": int(after),
        "ratio": after / before,
    }


def quantized_layers(model: Module) -> list[tuple[str, Linear]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, Linear) and m.quant is not None]


def install_quantized(model: Module, blobs: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
    """Put stored (int8, scale) pairs back into the named linear layers."""
    mods = dict(model.named_modules())
    for name, (q, scale) in blobs.items():
        lin = mods[name]
        lin.quant = QuantizedLinear(np.asarray(q, dtype=np.int8), np.asarray(scale), lin.bias)
        lin.weight = None
