"""Adam and the cosine-annealing-with-warm-restarts learning rate."""

from __future__ import annotations

import math
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, NumericalError
from .nn import Parameter


def lr_schedule(epoch: float, base_lr: float = 3e-4, t0: float = 10, t_mult: float = 2, gamma: float = 0.5) -> float:
    """Cycle k spans t0 * t_mult**k epochs and peaks at base_lr * gamma**k."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if t0 < 1 or t_mult < 1 or not 0 < gamma <= 1:
        raise ConfigError(f"bad schedule t0={t0} t_mult={t_mult} gamma={gamma}")
    start, length, k = 0.0, float(t0), 0
    while epoch >= start + length:
        start += length
        length *= t_mult
        k += 1
    t = epoch - start
    return base_lr * gamma**k * (1.0 + math.cos(math.pi * t / length)) / 2.0


def restart_epochs(t0: int, t_mult: int, until: float) -> list[int]:
    out, start, length = [], 0, t0
    while start <= until:
        out.append(start)
        start += length
        length *= t_mult
    return out


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; ``step`` counts from 1. Returns (param, m, v)."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class Adam:
    def __init__(
        self,
        named_params: Iterable[tuple[str, Parameter]],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.99),
        eps: float = 1e-8,
    ):
        self.named = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.named:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient in parameter {name}")
        self.step_count += 1
        t = self.step_count
        for name, p in self.named:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[name], self.v[name] = (
                a.astype(p.data.dtype, copy=False)
                for a in adam_step(p.data, g, self.m[name], self.v[name], t, lr, self.beta1, self.beta2, self.eps)
            )

    def state_dict(self) -> dict:
        state = {f"m.{n}": a for n, a in self.m.items()}
        state.update({f"v.{n}": a for n, a in self.v.items()})
        return state

    def load_state_dict(self, state: dict, step_count: int) -> None:
        for n in self.m:
            self.m[n] = np.array(state[f"m.{n}"], dtype=self.m[n].dtype)
            self.v[n] = np.array(state[f"v.{n}"], dtype=self.v[n].dtype)
        self.step_count = int(step_count)
