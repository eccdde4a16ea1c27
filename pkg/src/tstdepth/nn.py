"""Layer vocabulary: conv/BN units, inverted residual blocks, and the
batch-normalized cross-attention transformer block."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError, UsageError
from .tensor import Tensor, default_dtype, matmul, relu6, softmax


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal container: parameters, buffers and child modules found by attribute."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._children.items())

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for mname, mod in self.named_modules():
            for pname, p in mod._params.items():
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules():
            for bname, b in mod._buffers.items():
                yield (f"{mname}.{bname}" if mname else bname), b

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in state.items():
            if own[name].shape != np.shape(arr):
                raise ConfigError(f"{name}: shape {np.shape(arr)} != {own[name].shape}")
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.data.dtype)
        for mname, mod in self.named_modules():
            for bname, b in mod._buffers.items():
                key = f"{mname}.{bname}" if mname else bname
                b[...] = state[key]

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        dt = np.dtype(dtype)
        for _, p in self.named_parameters():
            p.data = p.data.astype(dt)
            p.grad = None
        for _, mod in self.named_modules():
            for bname, b in list(mod._buffers.items()):
                mod.register_buffer(bname, b.astype(dt))
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 1,
        stride: int = 1,
        padding: Optional[int] = None,
        groups: int = 1,
        bias: bool = False,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigError(
                f"Conv2d: channels {in_channels}->{out_channels} not divisible by groups={groups}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.groups = kernel, stride, groups
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_channels // groups * kernel * kernel
        self.weight = Parameter(
            _he_uniform(rng, (out_channels, in_channels // groups, kernel, kernel), fan_in)
        )
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"Conv2d expects {self.in_channels} channels, got {x.shape[1]}")
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            ops.conv_output_size(h, self.kernel, self.stride, self.padding),
            ops.conv_output_size(w, self.kernel, self.stride, self.padding),
        )

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.output_hw(h, w)
        return self.kernel * self.kernel * (self.in_channels // self.groups) * self.out_channels * ho * wo


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm2d(
            x,
            self.weight,
            self.bias,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
        )


class ConvBN(Module):
    """conv (no bias) -> BN -> optional ReLU6."""

    def __init__(self, cin, cout, kernel=1, stride=1, groups=1, act=True, rng=None, bn_momentum=0.1, bn_eps=1e-5):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, stride, groups=groups, rng=rng)
        self.bn = BatchNorm2d(cout, bn_momentum, bn_eps)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return relu6(y) if self.act else y


@dataclass(frozen=True)
class InvertedResidualSpec:
    in_channels: int
    out_channels: int
    expansion: int = 4
    stride: int = 1
    kernel: int = 3

    def __post_init__(self):
        if self.expansion < 1:
            raise ConfigError(f"expansion must be positive, got {self.expansion}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")

    @property
    def use_shortcut(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels

    @property
    def hidden(self) -> int:
        return self.in_channels * self.expansion


class InvertedResidual(Module):
    def __init__(self, spec: InvertedResidualSpec, rng=None):
        super().__init__()
        self.spec = spec
        hid = spec.hidden
        self.expand = ConvBN(spec.in_channels, hid, 1, rng=rng)
        self.depthwise = ConvBN(hid, hid, spec.kernel, spec.stride, groups=hid, rng=rng)
        self.project = ConvBN(hid, spec.out_channels, 1, act=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ConfigError(
                f"InvertedResidual expects {self.spec.in_channels} channels, got {x.shape[1]}"
            )
        y = self.project(self.depthwise(self.expand(x)))
        return x + y if self.spec.use_shortcut else y


@dataclass(frozen=True)
class AttentionSpec:
    channels: int
    heads: int
    qk_dim_per_head: int = 16
    v_dim_per_head: int = 32

    @classmethod
    def for_channels(cls, channels: int, qk_dim: int = 16, v_dim: int = 32) -> "AttentionSpec":
        if channels % 32:
            raise ConfigError(f"attention channels {channels} must be a multiple of 32")
        return cls(channels, channels // 32, qk_dim, v_dim)


class CrossAttention(Module):
    """Queries from ``x``; keys and values from ``context``, both at the same grid size.

    Every projection is a 1x1 conv followed by BN. The output projection maps
    heads*v_dim back to ``spec.channels``. The residual is left to the caller.
    """

    def __init__(self, spec: AttentionSpec, context_channels: int, rng=None):
        super().__init__()
        self.spec = spec
        self.context_channels = context_channels
        h, dq, dv = spec.heads, spec.qk_dim_per_head, spec.v_dim_per_head
        self.to_q = ConvBN(spec.channels, h * dq, 1, act=False, rng=rng)
        self.to_k = ConvBN(context_channels, h * dq, 1, act=False, rng=rng)
        self.to_v = ConvBN(context_channels, h * dv, 1, act=False, rng=rng)
        self.proj = ConvBN(h * dv, spec.channels, 1, act=False, rng=rng)
        self.scale = dq**-0.5
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        if x.shape[2:] != context.shape[2:]:
            raise UsageError(
                f"cross attention needs matching grids, got {x.shape[2:]} and {context.shape[2:]}"
            )
        if context.shape[1] != self.context_channels:
            raise ConfigError(
                f"context has {context.shape[1]} channels, expected {self.context_channels}"
            )
        n, _, hh, ww = x.shape
        length = hh * ww
        h, dq, dv = self.spec.heads, self.spec.qk_dim_per_head, self.spec.v_dim_per_head
        q = self.to_q(x).reshape(n, h, dq, length).permute(0, 1, 3, 2)
        k = self.to_k(context).reshape(n, h, dq, length)
        v = self.to_v(context).reshape(n, h, dv, length).permute(0, 1, 3, 2)
        attn = softmax(matmul(q, k) * self.scale, axis=-1)
        self.last_attention = attn.data
        out = matmul(attn, v).permute(0, 1, 3, 2).reshape(n, h * dv, hh, ww)
        return self.proj(out)

    def attention_macs(self, length_q: int, length_k: int) -> int:
        s = self.spec
        return s.heads * s.qk_dim_per_head * length_q * length_k + s.heads * s.v_dim_per_head * length_q * length_k


@dataclass(frozen=True)
class FFNSpec:
    channels: int
    hidden: int
    kernel: int = 3


class FFN(Module):
    """pointwise expand -> depthwise 3x3 -> pointwise back to the input width."""

    def __init__(self, spec: FFNSpec, rng=None):
        super().__init__()
        self.spec = spec
        c, hid = spec.channels, spec.hidden
        self.fc1 = ConvBN(c, hid, 1, rng=rng)
        self.dw = ConvBN(hid, hid, spec.kernel, 1, groups=hid, rng=rng)
        self.fc2 = ConvBN(hid, c, 1, act=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.channels:
            raise ConfigError(f"FFN expects {self.spec.channels} channels, got {x.shape[1]}")
        return self.fc2(self.dw(self.fc1(x)))


class TransformerBlock(Module):
    def __init__(self, attn: AttentionSpec, ffn: FFNSpec, context_channels: int, rng=None):
        super().__init__()
        if ffn.channels != attn.channels:
            raise ConfigError("FFN and attention widths differ")
        self.attn = CrossAttention(attn, context_channels, rng=rng)
        self.ffn = FFN(ffn, rng=rng)

    def refinement(self, x: Tensor, context: Tensor) -> Tensor:
        """Block output minus its input, i.e. the sum of both residual branches."""
        a = self.attn(x, context)
        return a + self.ffn(x + a)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        return x + self.refinement(x, context)


def zero_weights(module: Module) -> None:
    """Zero every conv weight below ``module``; BN affine params untouched."""
    for _, mod in module.named_modules():
        if isinstance(mod, Conv2d):
            mod.weight.data[...] = 0.0
            if mod.bias is not None:
                mod.bias.data[...] = 0.0


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]
