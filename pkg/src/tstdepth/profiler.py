"""Analytic parameter/MAC accounting and a wall-clock throughput harness.

MAC convention: one multiply-accumulate is one MAC. Convs count
Kh*Kw*(Cin/groups)*Cout*H'*W'; attention counts heads*d_qk*Nq*Nk for the
logits plus heads*d_v*Nq*Nk for the weighted values. Bias adds, BN,
activations, softmax, pooling and interpolation are free.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import (
    Decoder,
    Encoder,
    SelectiveFeatureFusion,
    TokenSharingConnection,
    TSTModel,
)
from .nn import (
    BatchNorm2d,
    Conv2d,
    ConvBN,
    CrossAttention,
    FFN,
    InvertedResidual,
    Module,
    TransformerBlock,
)
from .tensor import Tensor, count_executed_macs, no_grad


@dataclass
class LayerRow:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class ProfileReport:
    input_shape: tuple[int, ...]
    rows: list[LayerRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def macs_under(self, prefix: str) -> int:
        return sum(r.macs for r in self.rows if r.name.startswith(prefix))

    def params_under(self, prefix: str) -> int:
        return sum(r.params for r in self.rows if r.name.startswith(prefix))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "kind", "params", "macs"])
        for r in self.rows:
            w.writerow([r.name, r.kind, r.params, r.macs])
        w.writerow(["TOTAL", "", self.total_params, self.total_macs])
        return buf.getvalue()

    def to_table(self, depth: Optional[int] = None) -> str:
        rows = self.rows
        if depth is not None:
            grouped: dict[str, LayerRow] = {}
            for r in rows:
                key = ".".join(r.name.split(".")[:depth])
                g = grouped.setdefault(key, LayerRow(key, "group", 0, 0))
                g.params += r.params
                g.macs += r.macs
            rows = list(grouped.values())
        width = max([len(r.name) for r in rows] + [5])
        lines = [f"{'name':<{width}}  {'kind':<10} {'params':>12} {'MACs':>16}"]
        for r in rows:
            lines.append(f"{r.name:<{width}}  {r.kind:<10} {r.params:>12,d} {r.macs:>16,d}")
        lines.append(
            f"{'TOTAL':<{width}}  {'':<10} {self.total_params:>12,d} {self.total_macs:>16,d}"
        )
        lines.append(
            f"input {'x'.join(map(str, self.input_shape))}: "
            f"{self.total_params / 1e6:.3f} M params, {self.total_macs / 1e9:.3f} G MACs"
        )
        return "\n".join(lines)


class _Walker:
    def __init__(self) -> None:
        self.rows: list[LayerRow] = []

    def conv(self, name: str, conv: Conv2d, shape):
        c, h, w = shape
        if c != conv.in_channels:
            raise ValueError(f"{name}: expects {conv.in_channels} channels, got {c}")
        ho, wo = conv.output_hw(h, w)
        params = conv.weight.size + (conv.bias.size if conv.bias is not None else 0)
        kind = "dwconv" if conv.groups > 1 else "conv"
        self.rows.append(LayerRow(name, kind, params, conv.macs(h, w)))
        return (conv.out_channels, ho, wo)

    def bn(self, name: str, bn: BatchNorm2d, shape):
        self.rows.append(LayerRow(name, "bn", bn.weight.size + bn.bias.size, 0))
        return shape

    def convbn(self, name: str, m: ConvBN, shape):
        shape = self.conv(f"{name}.conv", m.conv, shape)
        return self.bn(f"{name}.bn", m.bn, shape)

    def inverted_residual(self, name: str, m: InvertedResidual, shape):
        shape = self.convbn(f"{name}.expand", m.expand, shape)
        shape = self.convbn(f"{name}.depthwise", m.depthwise, shape)
        return self.convbn(f"{name}.project", m.project, shape)

    def encoder(self, name: str, m: Encoder, shape):
        shape = self.convbn(f"{name}.stem", m.stem, shape)
        taps = {}
        for i, (block, tap) in enumerate(zip(m.blocks, m.taps)):
            shape = self.inverted_residual(f"{name}.blocks.{i}", block, shape)
            if tap:
                taps[tap] = shape
        return taps

    def attention(self, name: str, m: CrossAttention, q_shape, ctx_shape):
        self.convbn(f"{name}.to_q", m.to_q, q_shape)
        self.convbn(f"{name}.to_k", m.to_k, ctx_shape)
        v_shape = self.convbn(f"{name}.to_v", m.to_v, ctx_shape)
        lq = q_shape[1] * q_shape[2]
        lk = ctx_shape[1] * ctx_shape[2]
        self.rows.append(LayerRow(f"{name}.attend", "attention", 0, m.attention_macs(lq, lk)))
        return self.convbn(f"{name}.proj", m.proj, v_shape[:1] + q_shape[1:])

    def ffn(self, name: str, m: FFN, shape):
        shape = self.convbn(f"{name}.fc1", m.fc1, shape)
        shape = self.convbn(f"{name}.dw", m.dw, shape)
        return self.convbn(f"{name}.fc2", m.fc2, shape)

    def block(self, name: str, m: TransformerBlock, shape, ctx_shape):
        shape = self.attention(f"{name}.attn", m.attn, shape, ctx_shape)
        return self.ffn(f"{name}.ffn", m.ffn, shape)

    def connection(self, name: str, m: TokenSharingConnection, local_shapes, global_shape):
        if m.mode == "none":
            return list(local_shapes)
        grid = global_shape[1:]
        for i, (shape, block) in enumerate(zip(local_shapes, m.blocks)):
            pooled = (shape[0],) + tuple(grid)
            ctx = global_shape if m.mode == "cross" else pooled
            self.block(f"{name}.blocks.{i}", block, pooled, ctx)
        return list(local_shapes)

    def sff(self, name: str, m: SelectiveFeatureFusion, shape):
        mixed = self.convbn(f"{name}.mix", m.mix, (2 * shape[0],) + tuple(shape[1:]))
        self.conv(f"{name}.gate", m.gate, mixed)
        return shape

    def decoder(self, name: str, m: Decoder, local_shapes, global_shape, out_hw):
        shape = self.convbn(f"{name}.global_in", m.global_in, global_shape)
        for level in (2, 1, 0):
            lat = self.convbn(f"{name}.lateral.{level}", m.lateral[level], local_shapes[level])
            shape = (shape[0],) + tuple(lat[1:])
            shape = self.sff(f"{name}.fuse.{level}", m.fuse[level], shape)
            shape = self.convbn(f"{name}.refine.{level}", m.refine[level], shape)
        shape = (shape[0],) + tuple(out_hw)
        return self.conv(f"{name}.head", m.head, shape)


def count_macs(model: TSTModel, input_shape: Sequence[int]) -> ProfileReport:
    """Per-layer params and MACs for one image of ``input_shape`` (N x 3 x H x W or H x W)."""
    shape = _as_input_shape(input_shape)
    TSTModel.check_input(shape)
    n = shape[0]
    walker = _Walker()
    taps = walker.encoder("encoder", model.encoder, (3,) + tuple(shape[2:]))
    locals_ = [taps["F1"], taps["F2"], taps["F3"]]
    fused = walker.connection("connection", model.connection, locals_, taps["global"])
    walker.decoder("decoder", model.decoder, fused, taps["global"], tuple(shape[2:]))
    if n != 1:
        for r in walker.rows:
            r.macs *= n
    return ProfileReport(tuple(shape), walker.rows)


def count_params(model: Module) -> ProfileReport:
    """Learned scalars per parameterized module; BN running statistics are not counted."""
    rows = []
    for name, mod in model.named_modules():
        own = sum(p.size for p in mod._params.values())
        if own:
            rows.append(LayerRow(name, type(mod).__name__, own, 0))
    return ProfileReport((), rows)


def _as_input_shape(shape: Sequence[int]) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        return (1, 3) + shape
    if len(shape) == 4:
        return shape
    raise ValueError(f"input shape must be HxW or NxCxHxW, got {shape}")


def parse_shape(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ValueError(f"shape must look like 480x640, got {text!r}") from None


def macs_oracle_check(module: Module, *inputs: Tensor, analytic: int) -> int:
    """|analytic - executed| where executed MACs are counted inside the kernels."""
    module.eval()
    with no_grad(), count_executed_macs() as counter:
        module(*inputs)
    return abs(int(analytic) - counter.total)


def model_macs_discrepancy(model: TSTModel, input_shape: Sequence[int], seed: int = 0) -> int:
    shape = _as_input_shape(input_shape)
    analytic = count_macs(model, shape).total_macs
    x = Tensor(np.random.default_rng(seed).uniform(0, 1, size=shape))
    return macs_oracle_check(model, x, analytic=analytic)


@dataclass
class BenchReport:
    input_shape: tuple[int, ...]
    warmup_iters: int
    timed_iters: int
    latencies: list[float]

    @property
    def total_time(self) -> float:
        return float(sum(self.latencies))

    @property
    def fps(self) -> float:
        return self.timed_iters / self.total_time

    @property
    def mean_latency(self) -> float:
        return statistics.fmean(self.latencies)

    @property
    def p50_latency(self) -> float:
        return float(np.percentile(self.latencies, 50))

    @property
    def p95_latency(self) -> float:
        return float(np.percentile(self.latencies, 95))

    def summary(self) -> dict:
        return {
            "input_shape": "x".join(map(str, self.input_shape)),
            "warmup_iters": self.warmup_iters,
            "timed_iters": self.timed_iters,
            "fps": self.fps,
            "mean_ms": 1e3 * self.mean_latency,
            "p50_ms": 1e3 * self.p50_latency,
            "p95_ms": 1e3 * self.p95_latency,
        }

    def to_csv(self) -> str:
        s = self.summary()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(s))
        w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in s.values()])
        return buf.getvalue()

    def to_table(self) -> str:
        s = self.summary()
        width = max(len(k) for k in s)
        return "\n".join(
            f"{k:<{width}}  {v:.3f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
            for k, v in s.items()
        )


def benchmark_fps(
    model: Module,
    input_shape: Sequence[int],
    warmup: int = 20,
    iters: int = 200,
    seed: int = 0,
) -> BenchReport:
    """Time ``iters`` eval-mode forwards after ``warmup`` discarded ones."""
    if iters < 1 or warmup < 0:
        raise ValueError("iters must be >= 1 and warmup >= 0")
    shape = _as_input_shape(input_shape)
    model.eval()
    x = Tensor(np.random.default_rng(seed).uniform(0, 1, size=shape))
    latencies = []
    with no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(iters):
            t0 = time.perf_counter()
            model(x)
            latencies.append(time.perf_counter() - t0)
    return BenchReport(tuple(shape), warmup, iters, latencies)
