"""Training loop, evaluation, and the flat ``key = value`` experiment config."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import AugmentConfig, DepthSample, augment, load_dataset
from .errors import ConfigError, EvaluationError, NumericalError
from .loss_metrics import EvalProtocol, MetricAccumulator, Metrics, silog_loss
from .model import ModelConfig, TSTModel
from .optim import Adam, lr_schedule, restart_epochs
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        v = value.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "tst-s"
    attention_mode: str = "cross"
    epochs: int = 200
    batch_size: int = 8
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    scheduler: str = "cosine"  # cosine | constant
    t0: int = 10
    t_mult: int = 2
    gamma: float = 0.5
    seed: int = 0
    data: str = "synth:count=64,seed=0,size=64x64"
    val_data: str = ""
    p_hflip: float = 0.5
    p_color: float = 0.5
    p_cutdepth: float = 0.25
    crop: str = ""  # HxW, empty = full sample
    loss_lambda: float = 0.85
    loss_alpha: float = 10.0
    max_depth: float = 10.0
    out_dir: str = "runs/tst"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.t0 < 1 or self.t_mult < 1 or not 0 < self.gamma <= 1:
            raise ConfigError("scheduler needs t0 >= 1, t_mult >= 1, 0 < gamma <= 1")
        if self.scheduler not in ("cosine", "constant"):
            raise ConfigError(f"scheduler must be cosine or constant, got {self.scheduler!r}")

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(mapping) - set(kinds))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**{k: _coerce(v, kinds[k]) for k, v in mapping.items()})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_mapping(parse_kv(Path(path).read_text(encoding="utf-8")))

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_variant(self.variant, attention_mode=self.attention_mode, max_depth=self.max_depth)

    def augment_config(self) -> AugmentConfig:
        crop = None
        if self.crop:
            h, w = self.crop.lower().split("x")
            crop = (int(h), int(w))
        return AugmentConfig(self.p_hflip, self.p_color, self.p_cutdepth, crop, max_depth=self.max_depth)

    def lr_at(self, epoch: int) -> float:
        if self.scheduler == "constant":
            return self.lr
        return lr_schedule(epoch, self.lr, self.t0, self.t_mult, self.gamma)


@dataclass
class TrainResult:
    model: TSTModel
    history: list[dict]
    step_losses: list[float]
    checkpoint_path: Optional[Path] = None


LOG_FIELDS = ["epoch", "lr", "train_loss", "val_delta1", "val_abs_rel", "val_rmse", "seconds"]


def _stack(samples: Sequence[DepthSample]):
    return (
        np.stack([s.rgb for s in samples]),
        np.stack([s.depth for s in samples]),
        np.stack([s.mask for s in samples]),
    )


def evaluate(
    model: TSTModel,
    samples: Sequence[DepthSample],
    protocol: Optional[EvalProtocol] = None,
    batch_size: int = 8,
) -> Metrics:
    """BN-eval forwards over ``samples``; metrics are pixel-weighted over the whole set."""
    if len(samples) == 0:
        raise EvaluationError("cannot evaluate an empty dataset")
    protocol = protocol or EvalProtocol(max_depth=model.config.max_depth)
    acc = MetricAccumulator(protocol)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                by_shape: dict = {}
                for s in chunk:
                    by_shape.setdefault(s.hw, []).append(s)
                for group in by_shape.values():
                    rgb, depth, mask = _stack(group)
                    pred = model(Tensor(pad_to_multiple(rgb, 32)))
                    h, w = depth.shape[-2:]
                    pred_np = pred.data[:, :, :h, :w]
                    for i in range(len(group)):
                        acc.update(pred_np[i, 0], depth[i, 0], mask[i, 0])
    finally:
        model.train(was_training)
    return acc.result()


def pad_to_multiple(rgb: np.ndarray, m: int) -> np.ndarray:
    h, w = rgb.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return rgb
    return np.pad(rgb, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")


def train(
    cfg: TrainConfig,
    samples: Optional[Sequence[DepthSample]] = None,
    val_samples: Optional[Sequence[DepthSample]] = None,
    resume: Optional[str] = None,
    stop_after_epoch: Optional[int] = None,
    write_files: bool = True,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Deterministic given ``cfg.seed``: shuffling and augmentation draw from per-epoch RNGs,
    so a resumed run replays exactly what the uninterrupted run would have done."""
    if samples is None:
        samples = load_dataset(cfg.data)
    if val_samples is None and cfg.val_data:
        val_samples = load_dataset(cfg.val_data)
    if len(samples) == 0:
        raise EvaluationError("training dataset is empty")
    model_cfg = cfg.model_config()
    model = TSTModel(model_cfg, seed=cfg.seed)
    opt = Adam(model.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    aug_cfg = cfg.augment_config()
    out_dir = Path(cfg.out_dir)
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    history: list[dict] = []
    if resume:
        ckpt = load_checkpoint(resume, expected=model_cfg)
        ckpt.restore(model, opt)
        start_epoch = ckpt.epoch
        history = list(ckpt.extra.get("history", []))

    restarts = set(restart_epochs(cfg.t0, cfg.t_mult, cfg.epochs)) - {0}
    last_good = Checkpoint.capture(model, start_epoch, opt, {"history": history})
    step_losses: list[float] = []
    ckpt_path: Optional[Path] = None
    end_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    n = len(samples)
    bs = min(cfg.batch_size, n)

    for epoch in range(start_epoch, end_epoch):
        t_start = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
        model.train()
        epoch_losses = []
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            if len(idx) < 2 and n >= 2:
                continue  # BN needs at least two samples
            batch = [augment(samples[i], aug_rng, aug_cfg) for i in idx]
            rgb, depth, mask = _stack(batch)
            try:
                pred = model(Tensor(rgb))
                loss = silog_loss(pred, depth, mask, cfg.loss_lambda, cfg.loss_alpha)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
            except NumericalError:
                if write_files:
                    save_checkpoint(out_dir / "last_good.ckpt", last_good)
                log.error("numerical failure in epoch %d; last good checkpoint kept", epoch)
                raise
            value = float(loss.data)
            step_losses.append(value)
            epoch_losses.append(value)
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else math.nan,
        }
        if val_samples:
            m = evaluate(model, val_samples, EvalProtocol(max_depth=cfg.max_depth))
            row.update(val_delta1=m.delta1, val_abs_rel=m.abs_rel, val_rmse=m.rmse)
        row["seconds"] = time.perf_counter() - t_start
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f", epoch + 1, lr, row["train_loss"])
        if on_epoch is not None:
            on_epoch(row)
        last_good = Checkpoint.capture(model, epoch + 1, opt, {"history": history})
        if write_files:
            _write_log(out_dir / "train_log.csv", history)
            if (epoch + 1) in restarts:
                save_checkpoint(out_dir / f"epoch{epoch + 1:04d}.ckpt", last_good)
            if epoch + 1 == end_epoch:
                ckpt_path = out_dir / "final.ckpt"
                save_checkpoint(ckpt_path, last_good)
    return TrainResult(model, history, step_losses, ckpt_path)


def _write_log(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in LOG_FIELDS})
