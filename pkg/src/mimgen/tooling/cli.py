"""Command-line entry points.

Every subcommand writes into ``--out`` and finishes with ``run.json``: the
seed, the merged configuration and its hash, the package version, and a
sha256 for every file produced. Exit codes: 0 success, 2 usage error,
1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from ..backbone import Condition, ModelConfig, build_model
from ..conditioning import MicroConditioning
from ..quantize import quantize_model
from ..sampler import SamplerConfig, animate, generate, inpaint, vary
from ..training import (
    Batch,
    LoraConfig,
    TrainConfig,
    Trainer,
    attach_lora,
    bundle,
    evaluate_masked_ce,
    load_checkpoint,
    merge_lora,
    save_checkpoint,
)
from ..vq import VqConfig, smooth, train_vq
from . import plotting
from .bench import bench_throughput
from .data import DatasetSpec, caption_vocabulary, gen_dataset, quality_score
from .imageio import read_image, write_image

log = logging.getLogger("mimgen")

SECTIONS = ("dataset", "vq", "model", "train", "lora", "sampler")


class UsageError(Exception):
    pass


def version_string() -> str:
    return f"v{__version__}"


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def load_config(path) -> dict:
    """JSON object with optional sections ``dataset``, ``vq``, ``model``,
    ``train``, ``lora`` and ``sampler``; each maps field names to values."""
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _override(section: dict, **flags) -> dict:
    out = dict(section)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


# dataset directory layout: images/NNNN.ppm plus dataset.json

def save_dataset(samples, out: Path) -> list[Path]:
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records, paths = [], []
    for i, s in enumerate(samples):
        p = write_image(s.pixels, img_dir / f"{i:04d}.ppm")
        paths.append(p)
        records.append({"file": f"images/{p.name}", "caption": s.caption,
                        "micro": list(s.micro.as_array()), "attributes": {
                            k: s.attributes[k] for k in ("shape", "color", "background")}})
    paths.append(write_json(out / "dataset.json", records))
    return paths


def load_dataset(root) -> tuple[np.ndarray, list[str], np.ndarray]:
    root = Path(root)
    records = json.loads((root / "dataset.json").read_text())
    images = np.stack([read_image(root / r["file"]) for r in records])
    return images, [r["caption"] for r in records], np.array([r["micro"] for r in records])


def _micro_for(image: np.ndarray | None, size: int, quality: float | None) -> np.ndarray:
    if quality is None:
        quality = quality_score(image) if image is not None else 3.0
    return MicroConditioning(float(size), float(size), 0.0, 0.0, float(quality)).as_array()


# subcommands

def cmd_gen_data(args, cfg) -> list[Path]:
    spec = DatasetSpec(**_override(cfg.get("dataset", {}), count=args.count, image_size=args.size,
                                   seed=args.seed))
    return save_dataset(gen_dataset(spec), args.out)


def cmd_train_vq(args, cfg) -> list[Path]:
    images, _, _ = load_dataset(_need(args, "data"))
    vcfg = VqConfig(**_override(cfg.get("vq", {}), steps=args.steps, seed=args.seed))
    result = train_vq(images, vcfg)
    out = args.out
    sm = smooth(result.losses)
    paths = [
        save_checkpoint(bundle(vq=result.model, meta={"dead_codes": result.dead_codes}), out / "vq.mimf"),
        write_csv(out / "vq_loss.csv", ["step", "loss", "smoothed"],
                  [(i, repr(v), repr(float(s))) for i, (v, s) in enumerate(zip(result.losses, sm))]),
        plotting.plot_losses(result.losses, out / "vq_loss.png", smoothed=sm, title="VQ loss"),
        plotting.plot_token_usage(result.usage, out / "vq_usage.png"),
        write_json(out / "vq_report.json", {"dead_codes": result.dead_codes,
                                            "used_codes": int((result.usage > 0).sum()),
                                            "final_smoothed": float(sm[-1])}),
    ]
    return paths


def _history_outputs(out: Path, stem: str, history: list[dict], title: str) -> list[Path]:
    losses = [h["loss"] for h in history]
    return [
        write_csv(out / f"{stem}.csv", ["step", "loss", "accuracy"],
                  [(h["step"], repr(h["loss"]), repr(h["accuracy"])) for h in history]),
        plotting.plot_losses(losses, out / f"{stem}.png", smoothed=smooth(losses), title=title),
    ]


def cmd_train_mim(args, cfg) -> list[Path]:
    vocab = caption_vocabulary()
    tcfg = TrainConfig(**_override(cfg.get("train", {}), steps=args.steps, seed=args.seed,
                                   batch_size=args.batch_size, grad_accum=args.grad_accum, lr=args.lr))
    images, captions, micro = load_dataset(_need(args, "data"))
    if args.resume:
        ck = load_checkpoint(args.resume)
        vq, model = ck.restore_vq(), ck.restore_mim()
        tcfg = TrainConfig.from_dict({**ck.train_config, **_override({}, steps=args.steps)})
        opt = ck.restore_optimizer(model, tcfg.lr, (tcfg.beta1, tcfg.beta2), tcfg.eps)
        rng, step = ck.restore_rng(), ck.step
    else:
        vq = load_checkpoint(_need(args, "vq")).restore_vq()
        mcfg = ModelConfig(**_override(cfg.get("model", {}), caption_vocab_size=len(vocab)))
        # the token grid and codebook size are dictated by the VQ and the image size
        mcfg = ModelConfig(**{**mcfg.to_dict(), "grid": images.shape[1] // vq.factor,
                              "vocab_size": vq.config.vocab_size})
        model = build_model(mcfg)
        opt, rng, step = None, None, 0
    ids = np.stack([vocab.encode(c, model.config.max_caption_len) for c in captions])
    data = Batch.from_images(vq, images, ids, micro)
    trainer = Trainer(model, data, tcfg, optimizer=opt, rng=rng, step=step)
    trainer.run()
    ck = bundle(vq=vq, mim=model, optimizer=trainer.optimizer, rng=trainer.rng, vocabulary=vocab,
                train_config=tcfg, step=trainer.step)
    out = args.out
    return [save_checkpoint(ck, out / "mim.mimf"),
            *_history_outputs(out, "mim_loss", trainer.history, "masked CE")]


def _load_models(args):
    ck = load_checkpoint(_need(args, "checkpoint"))
    return ck, ck.restore_vq(), ck.restore_mim(), ck.restore_vocabulary()


def cmd_finetune_lora(args, cfg) -> list[Path]:
    ck, vq, model, vocab = _load_models(args)
    image = read_image(_need(args, "image"))
    caption = args.caption or "<null>"
    lcfg = LoraConfig(**_override(cfg.get("lora", {}), rank=args.rank, alpha=args.alpha))
    tcfg = TrainConfig(**_override(cfg.get("train", {}), steps=args.steps, seed=args.seed,
                                   batch_size=args.batch_size, lr=args.lr, cond_dropout=0.0))
    ids = vocab.encode(caption, model.config.max_caption_len)[None]
    data = Batch.from_images(vq, image[None], ids, _micro_for(image, image.shape[0], None)[None])
    attach_lora(model, lcfg, np.random.default_rng([tcfg.seed, 2]))
    before = evaluate_masked_ce(model, data)
    trainer = Trainer(model, data, tcfg)
    trainer.run()
    after = evaluate_masked_ce(model, data)
    if args.merge:
        merge_lora(model)
    out = args.out
    new = bundle(vq=vq, mim=model, vocabulary=vocab, train_config=tcfg, step=trainer.step,
                 meta={"source_step": ck.step})
    return [save_checkpoint(new, out / "lora.mimf"),
            write_json(out / "lora_report.json", {"masked_ce_before": before, "masked_ce_after": after,
                                                  "reduction": 1.0 - after / before,
                                                  "merged": bool(args.merge)}),
            *_history_outputs(out, "lora_loss", trainer.history, "adapter fine-tune masked CE")]


def _sampler_config(args, cfg) -> SamplerConfig:
    return SamplerConfig(**_override(cfg.get("sampler", {}), steps=args.steps, seed=args.seed,
                                      guidance_scale=args.cfg_scale, temperature=args.temperature))


def _condition(vocab, model, caption, micro, batch: int = 1) -> Condition:
    ids = vocab.encode(caption or "<null>", model.config.max_caption_len)
    return Condition(np.repeat(ids[None], batch, axis=0), np.repeat(micro[None], batch, axis=0))


def _write_outputs(out: Path, stem: str, vq, grids, titles=None) -> list[Path]:
    images = [vq.decode(g) for g in grids]
    paths = [write_image(img, out / f"{stem}_{i:02d}.ppm") for i, img in enumerate(images)]
    paths.append(write_json(out / f"{stem}_tokens.json", [np.asarray(g).tolist() for g in grids]))
    paths.append(plotting.plot_images(images, out / f"{stem}.png", titles=titles))
    return paths


def cmd_generate(args, cfg) -> list[Path]:
    _, vq, model, vocab = _load_models(args)
    size = model.config.grid * vq.factor
    cond = _condition(vocab, model, args.caption, _micro_for(None, size, args.quality), args.batch)
    grids = generate(model, cond, _sampler_config(args, cfg))
    return _write_outputs(args.out, "generate", vq, list(grids))


def cmd_vary(args, cfg) -> list[Path]:
    _, vq, model, vocab = _load_models(args)
    image = read_image(_need(args, "image"))
    strength = 0.5 if args.strength is None else args.strength
    cond = _condition(vocab, model, args.caption, _micro_for(image, image.shape[0], args.quality))
    grids = vary(model, vq.tokenize(image)[0], strength, cond, _sampler_config(args, cfg))
    return _write_outputs(args.out, "vary", vq, list(grids))


def cmd_inpaint(args, cfg) -> list[Path]:
    _, vq, model, vocab = _load_models(args)
    image = read_image(_need(args, "image"))
    pixel_mask = read_image(args.mask).mean(axis=-1) > 0.5
    cond = _condition(vocab, model, args.caption, _micro_for(image, image.shape[0], args.quality))
    grids = inpaint(model, vq.tokenize(image)[0], pixel_mask, cond, _sampler_config(args, cfg), vq.factor)
    return _write_outputs(args.out, "inpaint", vq, list(grids))


def cmd_animate(args, cfg) -> list[Path]:
    _, vq, model, vocab = _load_models(args)
    size = model.config.grid * vq.factor
    cond = _condition(vocab, model, args.caption, _micro_for(None, size, args.quality))
    shift = tuple(float(v) for v in args.shift.split(","))
    if len(shift) != 2:
        raise UsageError("--shift takes dx,dy")
    frames = animate(model, vq.codebook.entries.data, cond, args.frames, shift, _sampler_config(args, cfg))
    return _write_outputs(args.out, "frame", vq, frames, titles=[f"t={k}" for k in range(len(frames))])


def cmd_quantize(args, cfg) -> list[Path]:
    ck, vq, model, vocab = _load_models(args)
    if ck.lora is not None:
        merge_lora(model)
    model.freeze()
    report = quantize_model(model)
    out = args.out
    return [save_checkpoint(bundle(vq=vq, mim=model, vocabulary=vocab, step=ck.step), out / "quantized.mimf"),
            write_json(out / "quantize_report.json", report)]


def cmd_bench(args, cfg) -> list[Path]:
    _, vq, model, vocab = _load_models(args)
    size = model.config.grid * vq.factor
    cond = _condition(vocab, model, args.caption, _micro_for(None, size, args.quality))
    sizes = [int(v) for v in args.batch_sizes.split(",")]
    report = bench_throughput(model, cond, sizes, args.repetitions, _sampler_config(args, cfg))
    out = args.out
    rows = [(r.batch_size, r.forward_count, f"{r.median:.6f}", f"{r.per_image:.6f}") for r in report.rows]
    return [write_json(out / "bench.json", report.to_dict()),
            write_json(out / "bench_counts.json", report.to_dict(timings=False)),
            write_csv(out / "bench.csv", ["batch_size", "forward_count", "median_s", "per_image_s"], rows),
            plotting.plot_bench(report, out / "bench.png")]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vq": cmd_train_vq,
    "train-mim": cmd_train_mim,
    "finetune-lora": cmd_finetune_lora,
    "generate": cmd_generate,
    "vary": cmd_vary,
    "inpaint": cmd_inpaint,
    "animate": cmd_animate,
    "quantize": cmd_quantize,
    "bench": cmd_bench,
}

# files whose content depends on wall-clock time
TIMING_OUTPUTS = {"bench.json", "bench.csv", "bench.png"}


def _need(args, name: str):
    value = getattr(args, name, None)
    if value is None:
        raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("-v", "--verbose", action="store_true")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--checkpoint", type=Path)
    sampling.add_argument("--caption")
    sampling.add_argument("--steps", type=int)
    sampling.add_argument("--cfg-scale", type=float)
    sampling.add_argument("--temperature", type=float)
    sampling.add_argument("--quality", type=float)

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--steps", type=int)
    training.add_argument("--batch-size", type=int)
    training.add_argument("--lr", type=float)

    p = argparse.ArgumentParser(prog="mimgen", description="Masked-token image generation at desk scale.")
    p.add_argument("--version", action="version", version=f"mimgen {version_string()}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="render the captioned shapes dataset")
    s.add_argument("--count", type=int)
    s.add_argument("--size", type=int)

    s = sub.add_parser("train-vq", parents=[common], help="train the VQ autoencoder")
    s.add_argument("--data", type=Path)
    s.add_argument("--steps", type=int)

    s = sub.add_parser("train-mim", parents=[common, training], help="train the masked-token backbone")
    s.add_argument("--data", type=Path)
    s.add_argument("--vq", type=Path, help="checkpoint holding the trained VQ")
    s.add_argument("--grad-accum", type=int)
    s.add_argument("--resume", type=Path, help="continue from a train-mim checkpoint")

    s = sub.add_parser("finetune-lora", parents=[common, training], help="adapter fine-tune on one image")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--image", type=Path)
    s.add_argument("--caption")
    s.add_argument("--rank", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--merge", action="store_true", help="fold adapters into the base weights")

    sub.add_parser("generate", parents=[common, sampling], help="sample images from a caption") \
        .add_argument("--batch", type=int, default=1)

    s = sub.add_parser("vary", parents=[common, sampling], help="re-decode part of an image")
    s.add_argument("--image", type=Path)
    s.add_argument("--strength", type=float)

    s = sub.add_parser("inpaint", parents=[common, sampling], help="re-decode a masked region")
    s.add_argument("--image", type=Path)
    s.add_argument("--mask", type=Path, required=True, help="PPM; white pixels are re-generated")

    s = sub.add_parser("animate", parents=[common, sampling], help="warp-and-refine frame sequence")
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--shift", default="1,0", help="per-frame latent shift dx,dy")

    s = sub.add_parser("quantize", parents=[common], help="int8 transformer projections")
    s.add_argument("--checkpoint", type=Path)

    s = sub.add_parser("bench", parents=[common, sampling], help="per-image latency against batch size")
    s.add_argument("--batch-sizes", default="1,8")
    s.add_argument("--repetitions", type=int, default=5)
    return p


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mimgen {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"mimgen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    options = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
               if k not in ("out", "verbose", "command")}
    record = {
        "command": args.command,
        "seed": args.seed,
        "options": options,
        "config": cfg,
        "config_hash": config_hash({"options": options, "config": cfg}),
        "version": version_string(),
        "outputs": {},
        "timing_outputs": [],
    }
    for p in outputs:
        name = Path(p).relative_to(args.out).as_posix()
        if name in TIMING_OUTPUTS:
            # wall-clock content; listed by name only so the record stays reproducible
            record["timing_outputs"].append(name)
        else:
            record["outputs"][name] = sha256(p)
    write_json(args.out / "run.json", record)
    for name, digest in record["outputs"].items():
        print(f"{digest}  {name}")
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
