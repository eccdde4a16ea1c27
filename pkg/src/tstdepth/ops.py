"""Image ops on N x C x H x W tensors: convolution, batch norm, pooling, resizing."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, _record_macs, _result, as_tensor


class DegenerateBatchError(ConfigError):
    """Train-mode batch norm over fewer than two values per channel."""


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Floor-mode output length; raises when nothing fits."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    span = size + 2 * padding - kernel
    if span < 0:
        raise ConfigError(
            f"kernel {kernel} does not fit input {size} with padding {padding}"
        )
    return span // stride + 1


def _shifted(xp: np.ndarray, i: int, j: int, s: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s]


def _conv_generic(xp: np.ndarray, w: np.ndarray, s: int, ho: int, wo: int):
    """im2col into a (C*Kh*Kw, N*Ho*Wo) matrix, then a single GEMM."""
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = _shifted(xp, i, j, s, ho, wo).transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = w.reshape(o, -1) @ cols
    _record_macs("conv", out.shape[0] * out.shape[1] * cols.shape[0])
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    return out, cols


def _conv_generic_backward(g, cols, w, xp_shape, s, ho, wo):
    n, c = xp_shape[:2]
    o, _, kh, kw = w.shape
    g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
    gw = (g2 @ cols.T).reshape(w.shape)
    gcols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            _shifted(gxp, i, j, s, ho, wo)[...] += gcols[:, i, j].transpose(1, 0, 2, 3)
    return gxp, gw


def _conv_taps(xp: np.ndarray, w: np.ndarray, s: int, ho: int, wo: int) -> np.ndarray:
    """Per-tap contraction; cheaper than im2col when there are only a few output channels."""
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(xp, w))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("oc,nchw->nohw", w[:, :, i, j], _shifted(xp, i, j, s, ho, wo), optimize=True)
            _record_macs("conv", n * o * c * ho * wo)
    return out


def _conv_taps_backward(g, xp, w, s, ho, wo):
    kh, kw = w.shape[2:]
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, _shifted(xp, i, j, s, ho, wo), optimize=True)
            _shifted(gxp, i, j, s, ho, wo)[...] += np.einsum("oc,nohw->nchw", w[:, :, i, j], g, optimize=True)
    return gxp, gw


def _conv_depthwise(xp: np.ndarray, w: np.ndarray, s: int, ho: int, wo: int):
    n, c = xp.shape[:2]
    kh, kw = w.shape[2:]
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(xp, w))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s]
            out += patch * w[:, 0, i, j][None, :, None, None]
            _record_macs("conv", patch.size)
    return out


def _conv_depthwise_backward(g, xp, w, s, ho, wo):
    kh, kw = w.shape[2:]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + (ho - 1) * s + 1, s), slice(j, j + (wo - 1) * s + 1, s))
            gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
            gxp[sl] += g * w[:, 0, i, j][None, :, None, None]
    return gxp, gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-d cross-correlation with zero padding and channel groups."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w_in = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"conv2d: channels in={cin} out={cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ConfigError(
            f"conv2d: weight expects {cin_g} channels per group, input gives {cin // groups}"
        )
    if bias is not None and as_tensor(bias).shape != (cout,):
        raise ConfigError(f"conv2d: bias shape {as_tensor(bias).shape} != ({cout},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w_in, kw, stride, padding)
    s, p = stride, padding

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    depthwise = groups == cin and cin_g == 1 and cout == cin
    pointwise = kh == 1 and kw == 1 and p == 0 and groups == 1

    saved = None
    if pointwise:
        xs = xd[:, :, ::s, ::s] if s > 1 else xd
        # channels-first matrix so one GEMM covers the whole batch
        flat = xs.transpose(1, 0, 2, 3).reshape(cin, n * ho * wo)
        out2 = wd.reshape(cout, cin) @ flat
        _record_macs("conv", out2.size * cin)
        out = np.ascontiguousarray(out2.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
        saved = flat
    elif depthwise:
        out = _conv_depthwise(xp, wd, s, ho, wo)
    elif groups == 1 and cout <= 4:
        out = _conv_taps(xp, wd, s, ho, wo)
    elif groups == 1:
        out, saved = _conv_generic(xp, wd, s, ho, wo)
    else:
        og, cg = cout // groups, cin // groups
        parts, saved = [], []
        for gi in range(groups):
            o_g, c_g = _conv_generic(xp[:, gi * cg : (gi + 1) * cg], wd[gi * og : (gi + 1) * og], s, ho, wo)
            parts.append(o_g)
            saved.append(c_g)
        out = np.concatenate(parts, axis=1)

    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if pointwise:
            g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
            gw = (g2 @ saved.T).reshape(wd.shape)
            gxs = (wd.reshape(cout, cin).T @ g2).reshape(cin, n, ho, wo).transpose(1, 0, 2, 3)
            if s > 1:
                gx = np.zeros_like(xd)
                gx[:, :, ::s, ::s] = gxs
            else:
                gx = gxs
            return (gx, gw, gb)
        if depthwise:
            gxp, gw = _conv_depthwise_backward(g, xp, wd, s, ho, wo)
        elif groups == 1 and cout <= 4:
            gxp, gw = _conv_taps_backward(g, xp, wd, s, ho, wo)
        elif groups == 1:
            gxp, gw = _conv_generic_backward(g, saved, wd, xp.shape, s, ho, wo)
        else:
            og, cg = cout // groups, cin // groups
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            gw = np.zeros_like(wd)
            for gi in range(groups):
                gx_g, gw_g = _conv_generic_backward(
                    np.ascontiguousarray(g[:, gi * og : (gi + 1) * og]),
                    saved[gi],
                    wd[gi * og : (gi + 1) * og],
                    (n, cg) + xp.shape[2:],
                    s,
                    ho,
                    wo,
                )
                gxp[:, gi * cg : (gi + 1) * cg] = gx_g
                gw[gi * og : (gi + 1) * og] = gw_g
        gx = gxp[:, :, p : p + h, p : p + w_in] if p else gxp
        return (gx, gw, gb)

    return _result(out, parents, bw, "conv2d")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization. In training mode the running buffers are updated in place.

    Running variance tracks the biased batch variance, so a model trained on a fixed
    batch evaluates identically in eval mode.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ConfigError(f"batch_norm2d expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batch_norm2d: affine params must be ({c},), got {gamma.shape}")
    xd = x.data
    g4 = gamma.data[None, :, None, None]
    if training:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(
                f"batch_norm2d in training mode needs >= 2 values per channel, got {m}"
            )
        mu = xd.mean(axis=(0, 2, 3))
        var = ((xd - mu[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        m = None
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None].astype(xd.dtype)) * inv_std[None, :, None, None]
    out = xhat * g4 + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv_std[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return (dx, dgamma, dbeta)

    return _result(out, (x, gamma, beta), bw, "batch_norm2d")


def _pool_matrix(size: int, target: int, dtype) -> np.ndarray:
    """Row i averages source indices [floor(i*size/target), ceil((i+1)*size/target))."""
    m = np.zeros((target, size), dtype=dtype)
    for i in range(target):
        lo = (i * size) // target
        hi = -((-(i + 1) * size) // target)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def _interp_matrix(size: int, target: int, align_corners: bool, dtype) -> np.ndarray:
    m = np.zeros((target, size), dtype=np.float64)
    for i in range(target):
        if align_corners:
            src = i * (size - 1) / (target - 1) if target > 1 else 0.0
        else:
            src = max((i + 0.5) * size / target - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.astype(dtype)


def _separable(x: Tensor, mh: np.ndarray, mw: np.ndarray, op: str) -> Tensor:
    xd = x.data
    out = np.matmul(np.matmul(mh, xd), mw.T)
    return _result(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),), op)


def avg_pool_to(x: Tensor, target: tuple[int, int], adaptive: bool = False) -> Tensor:
    """Mean over non-overlapping windows so the output is ``target`` (Ht, Wt).

    With ``adaptive=True`` non-divisible sizes are allowed; window i then covers
    [floor(i*H/Ht), ceil((i+1)*H/Ht)), so neighbouring windows may overlap by one.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ConfigError(f"avg_pool_to expects N x C x H x W, got {x.shape}")
    h, w = x.shape[2:]
    ht, wt = target
    if not (1 <= ht <= h and 1 <= wt <= w):
        raise ConfigError(f"avg_pool_to: target {target} must lie in [1, {(h, w)}]")
    if not adaptive and (h % ht or w % wt):
        raise ConfigError(f"avg_pool_to: {(h, w)} is not divisible by target {target}")
    if (ht, wt) == (h, w):
        return x
    return _separable(x, _pool_matrix(h, ht, x.dtype), _pool_matrix(w, wt, x.dtype), "avg_pool_to")


def bilinear_upsample(
    x: Tensor, target: tuple[int, int], align_corners: bool = False
) -> Tensor:
    """Bilinear resize to a size at least as large as the input."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ConfigError(f"bilinear_upsample expects N x C x H x W, got {x.shape}")
    h, w = x.shape[2:]
    ht, wt = target
    if ht < h or wt < w:
        raise ConfigError(
            f"bilinear_upsample: target {target} is smaller than input {(h, w)}; use avg_pool_to"
        )
    if (ht, wt) == (h, w):
        return x
    return _separable(
        x,
        _interp_matrix(h, ht, align_corners, x.dtype),
        _interp_matrix(w, wt, align_corners, x.dtype),
        "bilinear_upsample",
    )


def resize_bilinear(x: Tensor, target: tuple[int, int], align_corners: bool = False) -> Tensor:
    """Bilinear interpolation in either direction; used only by the evaluation protocol."""
    x = as_tensor(x)
    h, w = x.shape[2:]
    if (h, w) == tuple(target):
        return x
    return _separable(
        x,
        _interp_matrix(h, target[0], align_corners, x.dtype),
        _interp_matrix(w, target[1], align_corners, x.dtype),
        "resize_bilinear",
    )
