"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

GRAD_CHECK_EPS = 1e-5


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor | np.ndarray],
               eps: float = GRAD_CHECK_EPS, sample: int | None = None,
               seed: int = 0) -> float:
    """Worst relative error between autodiff and central-difference gradients.

    ``fn`` receives the inputs as tensors and must return a scalar tensor.
    Arrays are wrapped as float64 leaves; tensors are perturbed in place and
    restored. All inputs must be float64.

    Per element the error is ``|a - n| / max(|a|, |n|, floor)`` where ``floor``
    is 1e-3 of the largest gradient magnitude seen, so elements whose true
    gradient is (near) zero are judged against the scale of the function
    instead of producing 0/0. ``sample`` limits the check to that many
    randomly chosen elements per input.
    """
    tensors = [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None

    out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    numeric = []
    picked = []
    with no_grad():
        for t in tensors:
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if sample is not None and sample < flat.size:
                idx = np.sort(rng.choice(flat.size, size=sample, replace=False))
            vals = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn(*tensors).data)
                flat[i] = orig - eps
                fm = float(fn(*tensors).data)
                flat[i] = orig
                vals[j] = (fp - fm) / (2 * eps)
            numeric.append(vals)
            picked.append(idx)

    a_all = np.concatenate([a.reshape(-1)[i] for a, i in zip(analytic, picked)])
    n_all = np.concatenate(numeric)
    if a_all.size == 0:
        return 0.0
    floor = max(1e-3 * max(np.abs(a_all).max(), np.abs(n_all).max()), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a_all), np.abs(n_all)), floor)
    return float(np.max(np.abs(a_all - n_all) / denom))
