"""Binary checkpoint: magic 'TST1', u32 version, u32 header length, JSON header,
then little-endian f32 payloads at the offsets listed in the header."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError
from .model import ModelConfig, TSTModel
from .optim import Adam

MAGIC = b"TST1"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    epoch: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optimizer: Optional[dict[str, np.ndarray]] = None
    optimizer_step: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return self.config.digest()

    @classmethod
    def capture(cls, model: TSTModel, epoch: int, optimizer: Optional[Adam] = None, extra=None) -> "Checkpoint":
        return cls(
            model.config,
            epoch,
            {n: p.data.copy() for n, p in model.named_parameters()},
            {n: b.copy() for n, b in model.named_buffers()},
            optimizer.state_dict() if optimizer is not None else None,
            optimizer.step_count if optimizer is not None else 0,
            dict(extra or {}),
        )

    def restore(self, model: TSTModel, optimizer: Optional[Adam] = None) -> None:
        if model.config.digest() != self.digest:
            raise ConfigError(
                f"checkpoint config digest {self.digest} does not match model {model.config.digest()}"
            )
        state = dict(self.params)
        state.update(self.buffers)
        model.load_state_dict(state)
        if optimizer is not None and self.optimizer is not None:
            optimizer.load_state_dict(self.optimizer, self.optimizer_step)

    def build_model(self) -> TSTModel:
        model = TSTModel(self.config)
        self.restore(model)
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    sections = [("params", ckpt.params), ("buffers", ckpt.buffers)]
    if ckpt.optimizer is not None:
        sections.append(("optimizer", ckpt.optimizer))
    directory = []
    chunks = []
    offset = 0
    for section, tensors in sections:
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            directory.append(
                {"section": section, "name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)}
            )
            chunks.append(data)
            offset += len(data)
    header = {
        "variant": ckpt.config.variant,
        "config": ckpt.config.to_dict(),
        "digest": ckpt.digest,
        "epoch": ckpt.epoch,
        "optimizer_step": ckpt.optimizer_step,
        "extra": ckpt.extra,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated: expected at least 12 header bytes, got {len(raw)}")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte 0 (expected {MAGIC!r})")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise FormatError(f"{path}: truncated header: expected {12 + hlen} bytes, got {len(raw)}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header at byte 12: {exc}") from None
    config = ModelConfig.from_dict(header["config"])
    if config.digest() != header["digest"]:
        raise FormatError(f"{path}: header digest does not match embedded config")
    if expected is not None and expected.digest() != header["digest"]:
        raise ConfigError(
            f"{path}: checkpoint digest {header['digest']} does not match requested config {expected.digest()}"
        )
    base = 12 + hlen
    sections: dict[str, dict[str, np.ndarray]] = {"params": {}, "buffers": {}, "optimizer": {}}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise FormatError(
                f"{path}: tensor {entry['name']} truncated at byte {len(raw)}: expected {end} bytes"
            )
        arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        sections[entry["section"]][entry["name"]] = arr
    return Checkpoint(
        config,
        int(header["epoch"]),
        sections["params"],
        sections["buffers"],
        sections["optimizer"] or None,
        int(header.get("optimizer_step", 0)),
        header.get("extra", {}),
    )
