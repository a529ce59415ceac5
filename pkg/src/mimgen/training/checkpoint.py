"""Single-file checkpoint bundle.

Layout (all integers little-endian)::

    b"MIMF" | u32 version | u64 header length | JSON header | tensor blobs

The header is UTF-8 JSON with sorted keys. Its ``tensors`` list gives, in
file order, each blob's name, dtype (``f32``, ``f64`` or ``i8``), shape,
byte offset (relative to the first blob) and byte length. Blobs are raw
little-endian C-order arrays. Name prefixes: ``vq.`` autoencoder, ``mim.``
backbone, ``opt.m.``/``opt.v.`` Adam moments. Quantized layers store
``<layer>.weight.q`` (int8) and ``<layer>.weight.scale``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..backbone import MaskedImageModel, ModelConfig, build_model
from ..conditioning import CaptionVocabulary
from ..numerics.optim import Adam
from ..quantize import install_quantized, quantized_layers
from ..vq import VqConfig, VqModel
from .lora import LoraConfig, attach_lora

MAGIC = b"MIMF"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i8": np.dtype("i1")}
_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    vq_config: dict | None = None
    mim_config: dict | None = None
    train_config: dict | None = None
    lora: dict | None = None
    vocabulary: dict[str, int] | None = None
    rng_state: dict | None = None
    quantized: list[str] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)
    step: int = 0
    opt_t: int = 0
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "vq_config": self.vq_config,
            "mim_config": self.mim_config,
            "train_config": self.train_config,
            "vocabulary": self.vocabulary,
            "rng_state": self.rng_state,
            "meta": {
                **self.meta,
                "lora": self.lora,
                "quantized": list(self.quantized),
                "frozen": list(self.frozen),
                "step": self.step,
                "opt_t": self.opt_t,
            },
        }

    def _group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def restore_vq(self) -> VqModel:
        if self.vq_config is None:
            raise CheckpointError("checkpoint holds no VQ model")
        model = VqModel(VqConfig.from_dict(self.vq_config))
        model.load_state_dict(self._group("vq."))
        model.freeze()
        return model

    def restore_mim(self) -> MaskedImageModel:
        if self.mim_config is None:
            raise CheckpointError("checkpoint holds no backbone")
        model = build_model(ModelConfig.from_dict(self.mim_config))
        if self.lora is not None:
            attach_lora(model, LoraConfig.from_dict(self.lora))
        state = self._group("mim.")
        if self.quantized:
            install_quantized(model, {
                name: (state.pop(f"{name}.weight.q"), state.pop(f"{name}.weight.scale"))
                for name in self.quantized})
        model.load_state_dict(state)
        model.unfreeze()
        frozen = set(self.frozen)
        for name, p in model.named_parameters():
            p.set_trainable(name not in frozen)
        return model

    def restore_optimizer(self, model: MaskedImageModel, lr: float, betas=(0.9, 0.999),
                          eps: float = 1e-8) -> Adam:
        opt = Adam(model.trainable_parameters(), lr=lr, betas=betas, eps=eps)
        if self.opt_t:
            opt.load_state_dict(self._group("opt."), self.opt_t)
        return opt

    def restore_rng(self) -> np.random.Generator:
        if self.rng_state is None:
            raise CheckpointError("checkpoint holds no random state")
        bitgen = getattr(np.random, self.rng_state["bit_generator"])()
        bitgen.state = self.rng_state
        return np.random.Generator(bitgen)

    def restore_vocabulary(self) -> CaptionVocabulary:
        if self.vocabulary is None:
            raise CheckpointError("checkpoint holds no caption vocabulary")
        return CaptionVocabulary(dict(self.vocabulary))


def bundle(vq: VqModel | None = None, mim: MaskedImageModel | None = None, optimizer: Adam | None = None,
           rng: np.random.Generator | None = None, vocabulary: CaptionVocabulary | None = None,
           train_config=None, step: int = 0, meta: dict | None = None) -> Checkpoint:
    """Collect everything needed to resume or serve into a :class:`Checkpoint`."""
    ck = Checkpoint(step=step, meta=dict(meta or {}))
    if vq is not None:
        ck.vq_config = vq.config.to_dict()
        ck.tensors.update({f"vq.{k}": v for k, v in vq.state_dict().items()})
    if mim is not None:
        ck.mim_config = mim.config.to_dict()
        ck.tensors.update({f"mim.{k}": v for k, v in mim.state_dict().items()})
        for name, lin in quantized_layers(mim):
            ck.quantized.append(name)
            ck.tensors[f"mim.{name}.weight.q"] = lin.quant.q
            ck.tensors[f"mim.{name}.weight.scale"] = lin.quant.scale
        ck.frozen = [n for n, p in mim.named_parameters() if not p.trainable]
        lora = getattr(mim, "lora_config", None)
        ck.lora = lora.to_dict() if lora is not None else None
    if optimizer is not None:
        ck.opt_t = optimizer.t
        ck.tensors.update({f"opt.{k}": v for k, v in optimizer.state_dict().items()})
    if rng is not None:
        ck.rng_state = rng.bit_generator.state
    if vocabulary is not None:
        ck.vocabulary = dict(vocabulary.tokens)
    if train_config is not None:
        ck.train_config = train_config.to_dict()
    return ck


def to_bytes(ck: Checkpoint) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in ck.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _NAMES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        manifest.append({"name": name, "dtype": _NAMES[dt], "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = ck.header()
    header["tensors"] = manifest
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(text)) + text + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointTruncatedError("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise CheckpointTruncatedError("header extends past end of file")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    tensors = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointTruncatedError(f"tensor {entry['name']} extends past end of file")
        dt = _DTYPES[entry["dtype"]]
        arr = np.frombuffer(data[lo:hi], dtype=dt).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dt.newbyteorder("="))
    end = start + sum(e["nbytes"] for e in header["tensors"])
    if len(data) != end:
        raise CheckpointFormatError(f"{len(data) - end} trailing bytes after the last tensor")
    meta = dict(header.get("meta") or {})
    return Checkpoint(
        tensors=tensors,
        vq_config=header.get("vq_config"),
        mim_config=header.get("mim_config"),
        train_config=header.get("train_config"),
        lora=meta.pop("lora", None),
        vocabulary=header.get("vocabulary"),
        rng_state=header.get("rng_state"),
        quantized=meta.pop("quantized", []),
        frozen=meta.pop("frozen", []),
        step=meta.pop("step", 0),
        opt_t=meta.pop("opt_t", 0),
        meta=meta,
    )


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ck))
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
