"""Self-describing binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0-7    magic b"GXCKPT\\r\\n"
    bytes 8-11   uint32 format version
    bytes 12-19  uint64 header length H
    next H bytes UTF-8 JSON header, keys sorted
    remainder    float64 little-endian payload, arrays back to back

The header echoes the model and training configs, the stage tag, epoch, RNG
state and optimizer step, and lists every array as
``{"name", "group", "shape", "offset", "nbytes"}`` with offsets relative to
the payload start.  Array names are ``param/<name>``, ``adam_m/<name>`` and
``adam_v/<name>``.  Nothing time- or host-dependent is written, so equal
contents give equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import ModelConfig
from .model import ModelParams

MAGIC = b"GXCKPT\r\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    params: ModelParams
    train_config: dict
    stage: str
    epoch: int = -1
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return self.params.config


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays: list[tuple[str, str, np.ndarray]] = []
    for name in sorted(ckpt.params.values):
        arrays.append((f"param/{name}", ckpt.params.group_of(name), ckpt.params.values[name].data))
    for name in sorted(ckpt.optimizer.m):
        arrays.append((f"adam_m/{name}", "optimizer", ckpt.optimizer.m[name]))
        arrays.append((f"adam_v/{name}", "optimizer", ckpt.optimizer.v[name]))
    entries, chunks, offset = [], [], 0
    for name, group, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "group": group, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = _dumps(
        {
            "format_version": FORMAT_VERSION,
            "stage": ckpt.stage,
            "epoch": ckpt.epoch,
            "model_config": ckpt.params.config.to_dict(),
            "train_config": ckpt.train_config,
            "optimizer_step": ckpt.optimizer.step,
            "rng_state": ckpt.rng_state,
            "meta": ckpt.meta,
            "arrays": entries,
        }
    )
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    start = len(MAGIC) + 12
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    payload = memoryview(blob)[start + hlen :]
    params, m, v = {}, {}, {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
        kind, name = e["name"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[kind][name] = arr
    config = ModelConfig(**header["model_config"])
    return Checkpoint(
        params=ModelParams.from_arrays(config, params),
        train_config=header["train_config"],
        stage=header["stage"],
        epoch=header["epoch"],
        optimizer=OptimizerState(header["optimizer_step"], m, v),
        rng_state=header["rng_state"],
        meta=header["meta"],
    )


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
