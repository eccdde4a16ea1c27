"""Central finite-difference gradient checks for the autodiff core."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, mul, precision, tsum


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return out if out.ndim == 0 else tsum(mul(out, Tensor(weights, dtype=out.dtype)))


def roundoff_floor(loss_value: float, h: float, floor: float) -> float:
    """Entries whose size is within 1e4 roundoff bounds of zero are compared on that scale.

    A central difference of a float64 loss ``f`` carries absolute noise near
    eps * |f| / h, which swamps any relative measure when the true gradient is 0.
    """
    return max(floor, 1e4 * np.finfo(np.float64).eps * max(1.0, abs(loss_value)) / h)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-6,
    seed: int = 0,
    entries: Optional[int] = None,
) -> float:
    """Worst relative error between backprop and central differences over every input.

    Non-scalar outputs are reduced with a fixed random projection so every output
    element contributes. ``entries`` limits the check to a random subset per input.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        out = fn(*leaves)
        weights = rng.standard_normal(out.shape)
        loss = _scalarize(out, weights)
        floor = roundoff_floor(float(loss.data), h, floor)
        loss.backward()
        worst = 0.0
        for leaf in leaves:
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            idx = np.arange(flat.size)
            if entries is not None and entries < flat.size:
                idx = rng.choice(flat.size, entries, replace=False)
            numeric = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(_scalarize(fn(*leaves), weights).data)
                flat[i] = orig - h
                fm = float(_scalarize(fn(*leaves), weights).data)
                flat[i] = orig
                numeric[k] = (fp - fm) / (2 * h)
            worst = max(worst, max_relative_error(analytic.reshape(-1)[idx], numeric, floor))
    return worst


def check_module_gradients(
    module,
    loss_fn: Callable[[], Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
    entries: int = 20,
    seed: int = 0,
) -> float:
    """Sampled parameter gradients of ``loss_fn()`` against central differences.

    ``module`` must already be in float64; ``entries`` parameters are drawn
    uniformly over the full parameter vector.
    """
    rng = np.random.default_rng(seed)
    params = [p for _, p in module.named_parameters()]
    sizes = np.array([p.data.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(offsets[-1], min(entries, offsets[-1]), replace=False)
    with precision(np.float64):
        module.zero_grad()
        loss = loss_fn()
        floor = roundoff_floor(float(loss.data), h, floor)
        loss.backward()
        analytic, numeric = [], []
        for flat_i in picks:
            j = int(np.searchsorted(offsets, flat_i, side="right") - 1)
            p = params[j]
            flat = p.data.reshape(-1)
            i = flat_i - offsets[j]
            analytic.append(0.0 if p.grad is None else p.grad.reshape(-1)[i])
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric.append((fp - fm) / (2 * h))
    return max_relative_error(np.array(analytic), np.array(numeric), floor)
