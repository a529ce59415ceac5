"""Batch-throughput benchmark for end-to-end generation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..backbone import Condition, MaskedImageModel
from ..sampler import SamplerConfig, generate

WARMUP = 2


@dataclass
class BenchRow:
    batch_size: int
    times: list[float]
    forward_count: int

    @property
    def median(self) -> float:
        return float(np.median(self.times))

    @property
    def per_image(self) -> float:
        return self.median / self.batch_size

    def to_dict(self, timings: bool = True) -> dict:
        d = {"batch_size": self.batch_size, "forward_count": self.forward_count,
             "repetitions": len(self.times)}
        if timings:
            d.update(median_s=self.median, per_image_s=self.per_image, times_s=list(self.times))
        return d


@dataclass
class BenchReport:
    rows: list[BenchRow]
    sampler: dict
    model: dict
    quantized: bool = False
    extra: dict = field(default_factory=dict)

    def row(self, batch_size: int) -> BenchRow:
        for r in self.rows:
            if r.batch_size == batch_size:
                return r
        raise KeyError(batch_size)

    def to_dict(self, timings: bool = True) -> dict:
        """``timings=False`` drops wall-clock fields, leaving only content that
        is reproducible byte for byte."""
        return {"rows": [r.to_dict(timings) for r in self.rows], "sampler": self.sampler,
                "model": self.model, "quantized": self.quantized, **self.extra}


def expected_forwards(config: SamplerConfig) -> int:
    return config.steps if config.guidance_scale == 1 else 2 * config.steps


def bench_throughput(model: MaskedImageModel, cond: Condition, batch_sizes=(1, 8),
                     repetitions: int = 5, config: SamplerConfig | None = None,
                     clock=time.perf_counter) -> BenchReport:
    """Median wall time of ``generate`` per batch size after warm-up runs.

    ``cond`` must hold a single item; it is repeated to each batch size.
    Every timed call is checked to cost exactly T (or 2T with guidance)
    backbone evaluations.
    """
    if repetitions < 5:
        raise ValueError("at least 5 timed repetitions are required")
    if len(cond) != 1:
        raise ValueError("bench condition must hold exactly one item")
    config = config or SamplerConfig()
    want = expected_forwards(config)
    rows = []
    for bs in batch_sizes:
        c = cond.repeat(bs)
        for _ in range(WARMUP):
            generate(model, c, config)
        times = []
        for _ in range(repetitions):
            before = model.forward_count
            t0 = clock()
            generate(model, c, config)
            times.append(clock() - t0)
            got = model.forward_count - before
            if got != want:
                raise RuntimeError(f"generate ran {got} forward passes, expected {want}")
        rows.append(BenchRow(bs, times, want))
    quantized = any(getattr(m, "quant", None) is not None for _, m in model.named_modules())
    return BenchReport(rows, config.to_dict(), model.config.to_dict(), quantized)
