"""Pilot-calibrated constants and the shared single-image overfit run.

Pilot record (desk config, single CPU core, numpy float32):

* VQ, 8 images, 2000 steps, batch 8: initial loss 0.2955, smoothed final
  0.00136 (ratio 0.0046); reconstruction MSE 0.00042 against an all-gray
  baseline of 0.131; 25 of 256 codes used. About 150 s.
* Backbone overfit on one image, batch 4, lr 1e-3: exact token match 1.0
  already at 100 steps and at every later checkpoint up to 2000 steps.
  About 75 ms per step.
* Quantized against full precision on that model, tau = 0: agreement 1.0
  over 4 captions x 3 seeds at guidance 1 and 3; targeted bytes ratio
  0.2568.
* Adapter fine-tune (rank 16, alpha 32, batch 4, lr 1e-3) on the stripe
  image over that model: masked CE 12.85 before; reduction 0.886 at 100
  steps, 0.942 at 300, 0.947 at 400. About 56 ms per step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from mimgen.backbone import Condition, MaskedImageModel, ModelConfig, build_model
from mimgen.sampler import SamplerConfig, generate
from mimgen.training import Batch, TrainConfig, Trainer

VQ_IMAGES = 8
VQ_STEPS = 2000
VQ_LOSS_RATIO = 0.25          # final smoothed loss must fall below this share of the initial

OVERFIT_STEPS = 300
OVERFIT_BATCH = 4
OVERFIT_MATCH = 0.95          # pilot reached 1.0 from step 100 on

QUANT_AGREEMENT = 0.90        # pilot measured 1.0
QUANT_BYTES_RATIO = 0.26

LORA_STEPS = 300
LORA_BATCH = 4
LORA_LR = 1e-3
LORA_REDUCTION = 0.80

GREEDY = dict(temperature=0.0, confidence_temperature=0.0)


@dataclass
class OverfitRun:
    model: MaskedImageModel
    batch: Batch
    cond: Condition
    generated: np.ndarray
    history: list
    seconds: float

    @property
    def match(self) -> float:
        return float((self.generated.reshape(-1) == self.batch.tokens[0]).mean())


def overfit(vq, sample, vocab, steps: int = OVERFIT_STEPS) -> OverfitRun:
    config = ModelConfig(caption_vocab_size=len(vocab))
    model = build_model(config)
    caption = vocab.encode(sample.caption, config.max_caption_len)[None]
    micro = sample.micro.as_array()[None]
    batch = Batch.from_images(vq, sample.pixels[None], caption, micro)
    start = time.perf_counter()
    trainer = Trainer(model, batch, TrainConfig(batch_size=OVERFIT_BATCH, lr=1e-3, steps=steps))
    trainer.run()
    cond = Condition(caption, micro)
    out = generate(model, cond, SamplerConfig(guidance_scale=1.0, **GREEDY))
    return OverfitRun(model, batch, cond, out[0], trainer.history, time.perf_counter() - start)


# a tiny end-to-end CLI pipeline, small enough to run twice per session

CLI_CONFIG = {
    "dataset": {"count": 6, "image_size": 16},
    "vq": {"vocab_size": 16, "hidden": 8, "dim": 8, "steps": 20, "batch_size": 4},
    "model": {"dim": 32, "heads": 2, "depth": 1, "cond_dim": 16},
    "train": {"batch_size": 2, "steps": 3},
    "lora": {"rank": 2, "alpha": 4},
    "sampler": {"steps": 4},
}

CLI_PIPELINE = [
    ("data", ["gen-data", "--seed", "1"]),
    ("vq", ["train-vq", "--data", "data"]),
    ("mim", ["train-mim", "--data", "data", "--vq", "vq/vq.mimf"]),
    ("resumed", ["train-mim", "--data", "data", "--resume", "mim/mim.mimf", "--steps", "2"]),
    ("lora", ["finetune-lora", "--checkpoint", "mim/mim.mimf", "--image", "data/images/0000.ppm",
              "--steps", "3"]),
    ("gen", ["generate", "--checkpoint", "mim/mim.mimf", "--seed", "7", "--cfg-scale", "3",
             "--caption", "red circle light"]),
    ("vary", ["vary", "--checkpoint", "mim/mim.mimf", "--image", "data/images/0001.ppm",
              "--strength", "0.5", "--seed", "2"]),
    ("inpaint", ["inpaint", "--checkpoint", "mim/mim.mimf", "--image", "data/images/0001.ppm",
                 "--mask", "data/images/0002.ppm"]),
    ("animate", ["animate", "--checkpoint", "mim/mim.mimf", "--frames", "3"]),
    ("quant", ["quantize", "--checkpoint", "lora/lora.mimf"]),
    ("bench", ["bench", "--checkpoint", "quant/quantized.mimf"]),
]


def run_cli_pipeline(root) -> dict[str, int]:
    """Run every subcommand once inside ``root``, using relative paths so two
    roots produce comparable run records. Returns exit codes by output dir."""
    import json
    import os
    from pathlib import Path

    from mimgen.tooling.cli import run

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "cfg.json").write_text(json.dumps(CLI_CONFIG))
    here = os.getcwd()
    os.chdir(root)
    try:
        return {out: run([*argv, "--config", "cfg.json", "--out", out]) for out, argv in CLI_PIPELINE}
    finally:
        os.chdir(here)
