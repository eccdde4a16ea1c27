"""Encoder -> token-sharing connection -> decoder, in TST and TST-S widths."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, UsageError
from .nn import (
    AttentionSpec,
    BatchNorm2d,
    Conv2d,
    ConvBN,
    FFNSpec,
    InvertedResidual,
    InvertedResidualSpec,
    Module,
    ModuleList,
    TransformerBlock,
)
from .tensor import Tensor, as_tensor, concat, sigmoid

VARIANT_CHANNELS = {"tst": (64, 128, 160), "tst-s": (48, 96, 128)}
ATTENTION_MODES = ("cross", "self", "none")


@dataclass(frozen=True)
class StageSpec:
    """``blocks`` inverted residual blocks; the first one carries the stride."""

    out_channels: int
    expansion: int
    blocks: int
    stride: int
    tap: Optional[str] = None  # "F1".."F3" or "global"


@dataclass(frozen=True)
class EncoderSchedule:
    stem_channels: int
    stages: tuple[StageSpec, ...]

    def block_specs(self) -> list[tuple[InvertedResidualSpec, Optional[str]]]:
        specs = []
        cin = self.stem_channels
        for st in self.stages:
            for b in range(st.blocks):
                spec = InvertedResidualSpec(cin, st.out_channels, st.expansion, st.stride if b == 0 else 1)
                tap = st.tap if b == st.blocks - 1 else None
                specs.append((spec, tap))
                cin = st.out_channels
        return specs

    def tap_strides(self) -> dict[str, int]:
        stride = 2
        out = {}
        for st in self.stages:
            stride *= st.stride
            if st.tap:
                out[st.tap] = stride
        return out

    def tap_channels(self) -> dict[str, int]:
        return {st.tap: st.out_channels for st in self.stages if st.tap}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "tst"
    local_channels: tuple[int, int, int] = (64, 128, 160)
    global_channels: int = 256
    local_strides: tuple[int, int, int] = (8, 16, 32)
    global_stride: int = 64
    qk_dim: int = 16
    v_dim: int = 32
    ffn_expansion: int = 2
    decoder_channels: int = 64
    max_depth: float = 10.0
    attention_mode: str = "cross"
    heads: tuple[int, int, int] = (2, 4, 5)
    stem_channels: int = 32
    stage_expansion: tuple[int, int, int, int, int] = (6, 6, 4, 4, 4)
    stage_blocks: tuple[int, int, int, int, int] = (2, 2, 2, 2, 1)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        v = self.variant.lower()
        if v not in VARIANT_CHANNELS:
            raise ConfigError(f"unknown variant {self.variant!r}; use tst or tst-s")
        if tuple(self.local_channels) != VARIANT_CHANNELS[v]:
            raise ConfigError(
                f"{v} requires local channels {VARIANT_CHANNELS[v]}, got {tuple(self.local_channels)}"
            )
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if len(self.heads) != 3 or any(h < 1 for h in self.heads):
            raise ConfigError(f"need three positive head counts, got {self.heads}")
        strides = list(self.local_strides)
        if strides != [8, 16, 32]:
            raise ConfigError(f"local strides must be (8, 16, 32), got {tuple(strides)}")
        if self.global_stride not in (32, 64):
            raise ConfigError("global_stride must be 64 (default) or 32 (pooled-to-F_N reading)")
        if self.max_depth <= 0:
            raise ConfigError("max_depth must be positive")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        v = variant.lower()
        if v not in VARIANT_CHANNELS:
            raise ConfigError(f"unknown variant {variant!r}; use tst or tst-s")
        return cls(variant=v, local_channels=VARIANT_CHANNELS[v], **overrides)

    def with_mode(self, mode: str) -> "ModelConfig":
        return replace(self, attention_mode=mode)

    def schedule(self) -> EncoderSchedule:
        c1, c2, c3 = self.local_channels
        e, b = self.stage_expansion, self.stage_blocks
        return EncoderSchedule(
            self.stem_channels,
            (
                StageSpec(24, e[0], b[0], 2),
                StageSpec(c1, e[1], b[1], 2, "F1"),
                StageSpec(c2, e[2], b[2], 2, "F2"),
                StageSpec(c3, e[3], b[3], 2, "F3"),
                StageSpec(self.global_channels, e[4], b[4], self.global_stride // 32, "global"),
            ),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("local_channels", "local_strides", "heads", "stage_expansion", "stage_blocks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class FeaturePyramid(NamedTuple):
    locals: tuple[Tensor, Tensor, Tensor]
    global_tok: Tensor


class Encoder(Module):
    def __init__(self, schedule: EncoderSchedule, rng=None):
        super().__init__()
        self.schedule = schedule
        self.stem = ConvBN(3, schedule.stem_channels, 3, 2, rng=rng)
        self.blocks = ModuleList()
        self.taps: list[Optional[str]] = []
        for spec, tap in schedule.block_specs():
            self.blocks.append(InvertedResidual(spec, rng=rng))
            self.taps.append(tap)

    def forward(self, image: Tensor) -> FeaturePyramid:
        x = self.stem(image)
        found = {}
        for block, tap in zip(self.blocks, self.taps):
            x = block(x)
            if tap:
                found[tap] = x
        return FeaturePyramid((found["F1"], found["F2"], found["F3"]), found["global"])


class TokenSharingConnection(Module):
    """Pool each local map to the token grid, attend, upsample, add back.

    Only the block's refinement is upsampled, so a connection with zeroed
    weights leaves the pyramid untouched.

    ``mode='cross'`` takes keys/values from the shared global token,
    ``mode='self'`` from the pooled local map itself, ``mode='none'`` is a pass-through.
    """

    def __init__(self, cfg: ModelConfig, rng=None):
        super().__init__()
        self.mode = cfg.attention_mode
        self.blocks = ModuleList()
        if self.mode == "none":
            return
        for c, heads in zip(cfg.local_channels, cfg.heads):
            attn = AttentionSpec(c, heads, cfg.qk_dim, cfg.v_dim)
            ffn = FFNSpec(c, c * cfg.ffn_expansion)
            ctx = cfg.global_channels if self.mode == "cross" else c
            self.blocks.append(TransformerBlock(attn, ffn, ctx, rng=rng))

    def forward(self, pyr: FeaturePyramid) -> list[Tensor]:
        if self.mode == "none":
            return list(pyr.locals)
        grid = pyr.global_tok.shape[2:]
        out = []
        for f, block in zip(pyr.locals, self.blocks):
            pooled = ops.avg_pool_to(f, grid, adaptive=True)
            ctx = pyr.global_tok if self.mode == "cross" else pooled
            delta = block.refinement(pooled, ctx)
            out.append(f + ops.bilinear_upsample(delta, f.shape[2:]))
        return out


class SelectiveFeatureFusion(Module):
    """Two sigmoid gates computed from both inputs pick how much of each to keep."""

    def __init__(self, channels: int, rng=None):
        super().__init__()
        self.channels = channels
        self.mix = ConvBN(2 * channels, channels, 3, rng=rng)
        self.gate = Conv2d(channels, 2, 3, bias=True, rng=rng)

    def forward(self, local: Tensor, coarse: Tensor) -> Tensor:
        if local.shape != coarse.shape:
            raise UsageError(f"fusion inputs differ: {local.shape} vs {coarse.shape}")
        gates = sigmoid(self.gate(self.mix(concat([local, coarse], axis=1))))
        return gates[:, 0:1] * local + gates[:, 1:2] * coarse


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        super().__init__()
        d = cfg.decoder_channels
        self.max_depth = float(cfg.max_depth)
        self.global_in = ConvBN(cfg.global_channels, d, 1, rng=rng)
        self.lateral = ModuleList(ConvBN(c, d, 1, rng=rng) for c in cfg.local_channels)
        self.fuse = ModuleList(SelectiveFeatureFusion(d, rng=rng) for _ in cfg.local_channels)
        self.refine = ModuleList(ConvBN(d, d, 3, rng=rng) for _ in cfg.local_channels)
        self.head = Conv2d(d, 1, 3, bias=True, rng=rng)

    def forward(self, fused: Sequence[Tensor], global_tok: Tensor, out_hw: tuple[int, int]) -> Tensor:
        x = self.global_in(global_tok)
        for level in (2, 1, 0):
            lat = self.lateral[level](fused[level])
            x = ops.bilinear_upsample(x, lat.shape[2:])
            x = self.refine[level](self.fuse[level](lat, x))
        x = ops.bilinear_upsample(x, out_hw)
        return sigmoid(self.head(x)) * self.max_depth


class TSTModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg.schedule(), rng=rng)
        self.connection = TokenSharingConnection(cfg, rng=rng)
        self.decoder = Decoder(cfg, rng=rng)
        for _, mod in self.named_modules():
            if isinstance(mod, BatchNorm2d):
                mod.momentum, mod.eps = cfg.bn_momentum, cfg.bn_eps

    @staticmethod
    def check_input(shape: Sequence[int]) -> None:
        if len(shape) != 4 or shape[1] != 3:
            raise ConfigError(f"expected an N x 3 x H x W image batch, got {tuple(shape)}")
        h, w = shape[2:]
        if h < 32 or w < 32 or h % 32 or w % 32:
            raise ConfigError(
                f"input {h}x{w}: height and width must be multiples of 32 (the deepest local stride)"
            )

    def encode(self, image: Tensor) -> FeaturePyramid:
        image = as_tensor(image)
        self.check_input(image.shape)
        return self.encoder(image)

    def forward(self, image: Tensor) -> Tensor:
        image = as_tensor(image)
        pyr = self.encode(image)
        fused = self.connection(pyr)
        return self.decoder(fused, pyr.global_tok, image.shape[2:])


def build_model(variant: str = "tst", seed: int = 0, **overrides) -> TSTModel:
    return TSTModel(ModelConfig.for_variant(variant, **overrides), seed=seed)
