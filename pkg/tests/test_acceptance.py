"""The twelve acceptance criteria, one test each.

A summary line per criterion (PASS or FAIL) is printed at the end of the
session by the hook in ``conftest.py``. Pilot-calibrated thresholds live in
``fixtures.py``.
"""

import copy
import math
import time

import numpy as np
import pytest

from mimgen.backbone import Condition, ModelConfig, build_model
from mimgen.numerics import Tensor, attention, default_dtype, grad_check
from mimgen.quantize import quantize_model, quantized_layers
from mimgen.sampler import SamplerConfig, _logits, generate, guided_logits, inpaint, pixel_mask_to_tokens
from mimgen.schedule import mask_fraction
from mimgen.tooling.bench import bench_throughput
from mimgen.tooling.cli import TIMING_OUTPUTS
from mimgen.tooling.data import style_image
from mimgen.training import (
    Batch,
    LoraConfig,
    TrainConfig,
    Trainer,
    attach_lora,
    evaluate_masked_ce,
    masked_ce_loss,
    merge_lora,
)
from mimgen.vq import Codebook, quantize

from . import fixtures as F
from .conftest import make_condition
from .test_backbone import tiny_config
from .test_numerics import PRIMITIVE_CASES, rnd


@pytest.mark.acceptance(1, "schedule exactness")
def test_criterion_01_schedule_exactness():
    start = time.perf_counter()
    worst = 0.0
    for total in range(1, 65):
        assert mask_fraction(0, total) == 1.0
        assert mask_fraction(total, total) == 0.0
        for t in range(total + 1):
            worst = max(worst, abs(mask_fraction(t, total) - math.cos(t / total * math.pi / 2)))
    assert worst <= 1e-12
    assert time.perf_counter() - start < 1.0


@pytest.mark.acceptance(2, "decode-loop contract")
def test_criterion_02_decode_loop_contract(vocab):
    start = time.perf_counter()
    for n in (16, 64, 256, 1024):
        cfg = ModelConfig(grid=int(math.isqrt(n)), caption_vocab_size=len(vocab))
        model = build_model(cfg)
        cond = make_condition(vocab, cfg, ["green triangle dark"])
        for total in (4, 12):
            for scale in (1.0, 3.0):
                steps, prev = [], {}

                def hook(t, state):
                    if prev:
                        assert np.all(state.fixed >= prev["fixed"])
                    prev["fixed"] = state.fixed
                    steps.append((t, int(state.masked[0])))

                before = model.forward_count
                out = generate(model, cond, SamplerConfig(steps=total, guidance_scale=scale), on_step=hook)
                assert [t for t, _ in steps] == list(range(1, total + 1))
                assert steps[-1][1] == 0 and out.shape == (1, cfg.grid, cfg.grid)
                assert np.all(out < cfg.vocab_size)
                assert model.forward_count - before == (total if scale == 1.0 else 2 * total)
    assert time.perf_counter() - start < 30.0


@pytest.mark.acceptance(3, "masked-CE support")
def test_criterion_03_masked_ce_support():
    rng = np.random.default_rng(0)
    with default_dtype(np.float64):
        for _ in range(200):
            b, n, v = (int(x) for x in rng.integers(1, 6, size=3))
            v += 1
            logits = Tensor(rng.normal(size=(b, n, v)) * 4, requires_grad=True)
            mask = rng.random((b, n)) < 0.5
            mask.flat[rng.integers(mask.size)] = True
            masked_ce_loss(logits, rng.integers(0, v, size=(b, n)), mask).backward()
            assert np.all(logits.grad[~mask] == 0.0)
        for v in (2, 256, 8192):
            mask = np.array([[True, False, True]])
            loss = masked_ce_loss(Tensor(np.zeros((1, 3, v))), np.array([[0, v - 1, v // 2]]), mask)
            assert abs(float(loss.data) - math.log(v)) < 1e-6


@pytest.mark.acceptance(4, "gradient integrity")
def test_criterion_04_gradient_integrity():
    start = time.perf_counter()
    with default_dtype(np.float64):
        for name, (fn, shapes) in PRIMITIVE_CASES.items():
            inputs = [rnd(*s, seed=i) for i, s in enumerate(shapes)]
            assert grad_check(fn, inputs) < 1e-4, name
        mask = np.array([[True, True, False, True], [True, False, False, False]])
        masked = lambda q, k, v: (attention(q, k, v, heads=2, key_mask=mask)  # noqa: E731
                                  * np.arange(24.0).reshape(2, 3, 4)).sum()
        assert grad_check(masked, [rnd(2, 3, 4), rnd(2, 4, 4, seed=1), rnd(2, 4, 4, seed=2)]) < 1e-4

        for downsample in (False, True):
            cfg = tiny_config(downsample=downsample)
            model = build_model(cfg).astype(np.float64)
            rng = np.random.default_rng(0)
            for lin in (*model.film.gamma, *model.film.beta):
                lin.weight.data = rng.normal(0, 0.1, size=lin.weight.shape)
            ids = rng.integers(0, cfg.vocab_size + 1, size=(2, cfg.n_tokens))
            targets = rng.integers(0, cfg.vocab_size, size=(2, cfg.n_tokens))
            mask = ids == cfg.mask_id
            mask[:, :3] = True
            cond = Condition(np.array([[2, 3, 0], [4, 0, 0]]), rng.uniform(0, 40, size=(2, 5)))
            err = grad_check(lambda *_: masked_ce_loss(model(ids, cond), targets, mask),
                             model.parameters(), sample=4, seed=1)
            assert err < 1e-3
    assert time.perf_counter() - start < 120.0


def _brute_nearest(vectors, entries):
    best = np.full(len(vectors), np.inf)
    arg = np.zeros(len(vectors), dtype=np.int64)
    for j, e in enumerate(entries):
        d = ((vectors - e) ** 2).sum(axis=1)
        better = d < best  # strict, so ties keep the lower index
        best[better] = d[better]
        arg[better] = j
    return arg


@pytest.mark.acceptance(5, "VQ oracle")
def test_criterion_05_vq_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    ties = 0
    for i in range(10_000):
        v, d = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        cb = Codebook(v, d, rng)
        field = rng.normal(size=(2, 2, d))
        if i % 2:  # coarse grids make exact distance ties common
            cb.entries.data = np.round(cb.entries.data)
            field = np.round(field * 2) / 2
        ids, _, _ = quantize(Tensor(field), cb)
        want = _brute_nearest(field.reshape(-1, d), cb.entries.data.astype(np.float64)).reshape(2, 2)
        assert np.array_equal(ids, want)
        ties += len(np.unique(cb.entries.data, axis=0)) < v
    assert ties > 100
    assert time.perf_counter() - start < 10.0


@pytest.mark.acceptance(6, "overfit reproduction")
def test_criterion_06_overfit_reproduction(overfit_run):
    assert F.OVERFIT_STEPS <= 2000
    assert overfit_run.match >= F.OVERFIT_MATCH
    assert overfit_run.seconds < 600.0


@pytest.mark.acceptance(7, "CFG identities")
def test_criterion_07_cfg_identities(desk_model, vocab, desk_config):
    cond = make_condition(vocab, desk_config, ["red circle light", "blue square dark"])
    ids = np.random.default_rng(3).integers(0, desk_config.vocab_size + 1, size=(2, desk_config.n_tokens))
    c = desk_model(ids, cond).data
    u = desk_model(ids, cond, drop=np.ones(2, dtype=bool)).data
    assert np.abs(c - u).max() > 0
    assert np.array_equal(_logits(desk_model, ids, cond, 1.0), c)
    assert np.array_equal(_logits(desk_model, ids, cond, 0.0), u)
    assert np.array_equal(_logits(desk_model, ids, cond, 0.5), u + 0.5 * (c - u))
    assert np.array_equal(guided_logits(c, u, 0.5), u + 0.5 * (c - u))


@pytest.mark.acceptance(8, "inpainting preservation")
def test_criterion_08_inpainting_preservation(desk_model, vocab, desk_config):
    cond = make_condition(vocab, desk_config, ["blue circle dark"])
    g, f = desk_config.grid, 4
    for seed in range(100):
        rng = np.random.default_rng(seed)
        src = rng.integers(0, desk_config.vocab_size, size=(g, g))
        pm = rng.random((g * f, g * f)) < rng.uniform(0.0, 0.4)
        cfg = SamplerConfig(seed=seed)
        out = inpaint(desk_model, src, pm, cond, cfg, f)[0]
        keep = ~pixel_mask_to_tokens(pm, g, f)
        assert np.array_equal(out[keep], src[keep]), seed
    empty = inpaint(desk_model, src, np.zeros((g * f, g * f), bool), cond, SamplerConfig(), f)[0]
    assert np.array_equal(empty, src)


@pytest.mark.acceptance(9, "LoRA contract")
def test_criterion_09_lora_contract(overfit_run, trained_vq, vocab):
    assert LoraConfig(rank=16, alpha=32).scaling == 2.0
    model = copy.deepcopy(overfit_run.model)
    ids = np.random.default_rng(0).integers(0, 257, size=(1, 64))
    base = model(ids, overfit_run.cond).data
    attach_lora(model, LoraConfig(rank=16, alpha=32), np.random.default_rng(0))
    assert np.array_equal(model(ids, overfit_run.cond).data, base)

    config = model.config
    null = vocab.encode("<null>", config.max_caption_len)[None]
    data = Batch.from_images(trained_vq.model, style_image()[None], null, overfit_run.cond.micro)
    before = evaluate_masked_ce(model, data)
    assert F.LORA_STEPS <= 2000
    Trainer(model, data, TrainConfig(batch_size=F.LORA_BATCH, lr=F.LORA_LR, steps=F.LORA_STEPS,
                                     cond_dropout=0.0)).run()
    after = evaluate_masked_ce(model, data)
    assert 1.0 - after / before >= F.LORA_REDUCTION

    adapted = model(ids, overfit_run.cond).data
    merge_lora(model)
    assert np.abs(model(ids, overfit_run.cond).data - adapted).max() < 1e-5


@pytest.mark.acceptance(10, "quantization bounds")
def test_criterion_10_quantization_bounds(overfit_run, vocab):
    full = overfit_run.model
    model = copy.deepcopy(full).freeze()
    weights = {n: p.data.copy() for n, p in model.named_parameters()}
    report = quantize_model(model)
    assert report["ratio"] <= F.QUANT_BYTES_RATIO
    for name, lin in quantized_layers(model):
        err = np.abs(lin.quant.dequantized().astype(np.float64) - weights[f"{name}.weight"])
        assert np.all(err <= lin.quant.scale[:, None].astype(np.float64) / 2 * (1 + 1e-6)), name

    agree = []
    micro = overfit_run.cond.micro
    for caption in ("red circle light", "blue square dark", "green triangle light", "<null>"):
        cond = Condition(vocab.encode(caption, full.config.max_caption_len)[None], micro)
        for scale in (1.0, 3.0):
            for seed in range(3):
                cfg = SamplerConfig(guidance_scale=scale, seed=seed, **F.GREEDY)
                agree.append(float((generate(full, cond, cfg) == generate(model, cond, cfg)).mean()))
    assert min(agree) >= F.QUANT_AGREEMENT


@pytest.mark.acceptance(11, "batch-scaling direction")
def test_criterion_11_batch_scaling(desk_model, vocab, desk_config):
    desk_model.freeze()
    cond = make_condition(vocab, desk_config, ["red square light"])
    report = bench_throughput(desk_model, cond, (1, 8), repetitions=5, config=SamplerConfig(steps=12))
    assert report.row(1).forward_count == report.row(8).forward_count == 24
    assert report.row(8).per_image < report.row(1).per_image


@pytest.mark.acceptance(12, "determinism")
def test_criterion_12_determinism(cli_runs):
    (a, codes_a), (b, codes_b) = cli_runs
    assert set(codes_a.values()) == set(codes_b.values()) == {0}
    names = sorted(p.relative_to(a).as_posix() for p in a.rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(b).as_posix() for p in b.rglob("*") if p.is_file())
    kinds = set()
    for name in names:
        if name.rsplit("/", 1)[-1] in TIMING_OUTPUTS:
            continue
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
        kinds.add(name.rsplit(".", 1)[-1])
    assert {"ppm", "mimf", "json", "csv", "png"} <= kinds
