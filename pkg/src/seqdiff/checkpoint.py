"""Checkpoint persistence: config.json + weights.bin in a directory.

weights.bin is a flat sequence of named-tensor records, each:

    name_len  u32 little-endian
    name      utf-8 bytes
    rank      u32 little-endian
    dims      rank × u64 little-endian
    data      element-count × f32 little-endian

Writes go through a temp file and an atomic rename; loads verify the version
and fail naming the tensor on any truncated or oversized record.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

__all__ = [
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "TrainedModel",
    "write_tensors",
    "read_tensors",
    "save_checkpoint",
    "load_checkpoint",
    "save_trained",
    "load_trained",
]

CHECKPOINT_VERSION = 1

# Reject records whose header claims more than this many elements; guards
# against reading garbage dims from a corrupt file.
_MAX_ELEMENTS = 1 << 34


@dataclass
class Checkpoint:
    version: int
    config: dict
    tensors: dict


@dataclass
class TrainedModel:
    """A loaded checkpoint ready for sampling or resumed training."""

    backend: str  # "continuous" | "discrete"
    model: torch.nn.Module
    vocab: "object"
    sched: "object | None" = None  # NoiseSchedule (continuous)
    noise: "object | None" = None  # GeometricNoise (discrete)
    rate: "object | None" = None  # RateMatrix (discrete)
    train_cfg: dict | None = None
    step: int = 0
    opt_tensors: dict | None = None


def write_tensors(tensors: Mapping[str, torch.Tensor], path) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        for name, tensor in tensors.items():
            data = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<Q", dim))
            f.write(data.tobytes())
    os.replace(tmp, path)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return buf


def read_tensors(path) -> dict[str, torch.Tensor]:
    size = os.path.getsize(path)
    out: dict[str, torch.Tensor] = {}
    with open(path, "rb") as f:
        while f.tell() < size:
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "tensor name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name!r}"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"dims of {name!r}"))
            count = 1
            for d in dims:
                count *= d
            if count > _MAX_ELEMENTS or 4 * count > size - f.tell():
                raise ValueError(f"dimension overflow in tensor {name!r}: dims {dims}")
            raw = _read_exact(f, 4 * count, f"data of {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
            out[name] = torch.from_numpy(arr)
    return out


def save_checkpoint(config: dict, tensors: Mapping[str, torch.Tensor], path) -> None:
    """Write a checkpoint directory with config.json and weights.bin."""
    os.makedirs(path, exist_ok=True)
    cfg = dict(config)
    cfg["version"] = CHECKPOINT_VERSION
    cfg_path = os.path.join(path, "config.json")
    tmp = f"{cfg_path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)
    os.replace(tmp, cfg_path)
    write_tensors(tensors, os.path.join(path, "weights.bin"))


def load_checkpoint(path) -> Checkpoint:
    with open(os.path.join(path, "config.json"), "r", encoding="utf-8") as f:
        config = json.load(f)
    version = config.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version mismatch: file has {version}, expected {CHECKPOINT_VERSION}")
    tensors = read_tensors(os.path.join(path, "weights.bin"))
    return Checkpoint(version=version, config=config, tensors=tensors)


def save_trained(
    path,
    backend: str,
    model: torch.nn.Module,
    vocab,
    train_cfg: dict,
    step: int,
    sched=None,
    noise=None,
    rate=None,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> None:
    from .denoiser import INIT_SCHEME

    config: dict = {
        "backend": backend,
        "model": {"type": type(model).__name__.lower(), **model.cfg.to_dict()},
        "vocab": vocab.serialize(),
        "train": dict(train_cfg),
        "step": step,
        "init_scheme": INIT_SCHEME,
    }
    if sched is not None:
        config["schedule"] = sched.serialize()
    if noise is not None:
        config["noise"] = noise.serialize()
    if rate is not None:
        config["rate"] = rate.serialize()
    if extra:
        config["extra"] = extra

    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        params = [p for _, p in model.named_parameters()]
        state = optimizer.state
        for name, p in zip(names, params):
            st = state.get(p)
            if st:
                tensors[f"opt.exp_avg.{name}"] = st["exp_avg"]
                tensors[f"opt.exp_avg_sq.{name}"] = st["exp_avg_sq"]
        config["opt_step"] = step
    save_checkpoint(config, tensors, path)


def load_trained(path) -> TrainedModel:
    from .denoiser import Denoiser, DenoiserConfig
    from .discrete import GeometricNoise, RateMatrix, ScoreNet, ScoreNetConfig
    from .schedule import NoiseSchedule
    from .textspace import Vocabulary

    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    vocab = Vocabulary.deserialize(cfg["vocab"])
    model_cfg = dict(cfg["model"])
    model_type = model_cfg.pop("type")
    if model_type == "denoiser":
        model = Denoiser(DenoiserConfig(**model_cfg))
    elif model_type == "scorenet":
        model = ScoreNet(ScoreNetConfig(**model_cfg))
    else:
        raise ValueError(f"unknown model type {model_type!r}")
    state = {k[len("model."):]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    model.eval()

    opt_tensors = {k: v for k, v in ckpt.tensors.items() if k.startswith("opt.")} or None
    return TrainedModel(
        backend=cfg["backend"],
        model=model,
        vocab=vocab,
        sched=NoiseSchedule.deserialize(cfg["schedule"]) if "schedule" in cfg else None,
        noise=GeometricNoise.deserialize(cfg["noise"]) if "noise" in cfg else None,
        rate=RateMatrix.deserialize(cfg["rate"]) if "rate" in cfg else None,
        train_cfg=cfg.get("train"),
        step=int(cfg.get("step", 0)),
        opt_tensors=opt_tensors,
    )
