"""Scale-invariant log loss, depth metrics and the evaluation protocol."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from . import ops
from .errors import ConfigError, DomainError, EvaluationError
from .tensor import Tensor, _result, as_tensor

METRIC_FIELDS = ("delta1", "delta2", "delta3", "abs_rel", "sq_rel", "rmse")

# KITTI evaluation rectangle from Eigen et al., as fractions of the image size
EIGEN_ROWS = (0.40810811, 0.99189189)
EIGEN_COLS = (0.03594771, 0.96405229)


def silog_loss(
    pred: Tensor,
    gt,
    mask=None,
    lam: float = 0.85,
    alpha: float = 10.0,
) -> Tensor:
    """alpha * sqrt(mean(d^2) - lam * mean(d)^2) with d = log(pred) - log(gt) on the mask."""
    pred = as_tensor(pred)
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred.shape != gt_arr.shape:
        raise ConfigError(f"pred {pred.shape} and gt {gt_arr.shape} differ")
    m = np.ones(gt_arr.shape, dtype=bool) if mask is None else _mask_array(mask, gt_arr.shape)
    count = int(m.sum())
    if count == 0:
        raise EvaluationError("silog_loss: mask selects no pixels")
    if (pred.data[m] <= 0).any() or (gt_arr[m] <= 0).any():
        raise DomainError("silog_loss: pred and gt must be strictly positive on the mask")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    # one fused op: the reduction runs in float64 whatever the input precision, so
    # f32 losses are rounded once at the end and scale shifts cancel to within an ulp
    p64 = np.where(m, pred.data, 1.0).astype(np.float64)
    g64 = np.where(m, gt_arr, 1.0).astype(np.float64)
    d = np.where(m, np.log(p64) - np.log(g64), 0.0)
    mean_d = d.sum() / count
    centered = np.where(m, d - mean_d, 0.0)
    # mean(d^2) - lam*mean(d)^2 written as variance + (1-lam)*mean^2 to avoid cancellation
    inner = (centered * centered).sum() / count + (1.0 - lam) * mean_d * mean_d
    value = alpha * math.sqrt(inner) if inner > 0.0 else 0.0
    dtype = pred.dtype

    def backward(g):
        if value == 0.0:
            return (np.zeros_like(pred.data),)
        dinner = (2.0 / count) * (centered + np.where(m, (1.0 - lam) * mean_d, 0.0))
        grad = float(g) * alpha / (2.0 * math.sqrt(inner)) * dinner / p64
        return (grad.astype(dtype),)

    return _result(np.asarray(value, dtype=dtype), (pred,), backward, "silog")


def _mask_array(mask, shape) -> np.ndarray:
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    arr = arr.astype(bool)
    if arr.shape != tuple(shape):
        arr = np.broadcast_to(arr, shape)
    return arr


@dataclass(frozen=True)
class EvalProtocol:
    upsample_pred_to_gt: bool = True
    crop: str = "none"  # none | eigen
    min_depth: float = 1e-3
    max_depth: float = 10.0

    def __post_init__(self):
        if self.min_depth <= 0:
            raise ConfigError("min_depth must be > 0")
        if self.max_depth <= self.min_depth:
            raise ConfigError("max_depth must exceed min_depth")
        if self.crop not in ("none", "eigen"):
            raise ConfigError(f"crop must be none or eigen, got {self.crop!r}")


@dataclass
class Metrics:
    delta1: float
    delta2: float
    delta3: float
    abs_rel: float
    sq_rel: float
    rmse: float
    count: int = 0

    def as_row(self, variant: str) -> list:
        return [variant] + [getattr(self, f) for f in METRIC_FIELDS]

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_csv(rows: Iterable[tuple[str, Metrics]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant",) + METRIC_FIELDS)
    for variant, m in rows:
        w.writerow([variant] + [f"{getattr(m, f):.6f}" for f in METRIC_FIELDS])
    return buf.getvalue()


def eigen_crop(height: int, width: int) -> tuple[int, int, int, int]:
    """(row0, row1, col0, col1) of the Eigen crop; half-open, floored."""
    if height <= 0 or width <= 0:
        raise ConfigError("crop dims must be positive")
    return (
        int(math.floor(EIGEN_ROWS[0] * height)),
        int(math.floor(EIGEN_ROWS[1] * height)),
        int(math.floor(EIGEN_COLS[0] * width)),
        int(math.floor(EIGEN_COLS[1] * width)),
    )


def valid_mask(gt: np.ndarray, max_depth: float) -> np.ndarray:
    return (gt > 0) & (gt <= max_depth)


def _prepare(pred, gt, mask, protocol: EvalProtocol):
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape[-2:] != g.shape[-2:]:
        if not protocol.upsample_pred_to_gt:
            raise ConfigError(f"pred {p.shape} and gt {g.shape} differ and upsampling is off")
        p4 = p.reshape((-1, 1) + p.shape[-2:])
        p = ops.resize_bilinear(Tensor(p4, dtype=np.float64), g.shape[-2:]).data.reshape(
            p.shape[:-2] + g.shape[-2:]
        )
    if p.shape != g.shape:
        p = np.broadcast_to(p, g.shape)
    m = valid_mask(g, protocol.max_depth)
    if mask is not None:
        m &= _mask_array(mask, g.shape)
    if protocol.crop == "eigen":
        r0, r1, c0, c1 = eigen_crop(*g.shape[-2:])
        box = np.zeros(g.shape[-2:], dtype=bool)
        box[r0:r1, c0:c1] = True
        m &= box
    if not m.any():
        raise EvaluationError("no valid pixels left to evaluate")
    p = np.clip(p, protocol.min_depth, protocol.max_depth)
    return p[m], g[m]


def compute_metrics(pred, gt, mask=None, protocol: Optional[EvalProtocol] = None) -> Metrics:
    """Six standard depth metrics over valid pixels (gt in (0, max_depth], mask, crop)."""
    protocol = protocol or EvalProtocol()
    p, g = _prepare(pred, gt, mask, protocol)
    ratio = np.maximum(p / g, g / p)
    diff = p - g
    return Metrics(
        delta1=float((ratio < 1.25).mean()),
        delta2=float((ratio < 1.25**2).mean()),
        delta3=float((ratio < 1.25**3).mean()),
        abs_rel=float((np.abs(diff) / g).mean()),
        sq_rel=float((diff**2 / g).mean()),
        rmse=float(np.sqrt((diff**2).mean())),
        count=int(p.size),
    )


class MetricAccumulator:
    """Pixel-weighted aggregation of per-sample metrics."""

    def __init__(self, protocol: Optional[EvalProtocol] = None):
        self.protocol = protocol or EvalProtocol()
        self._n = 0
        self._sums = dict.fromkeys(("d1", "d2", "d3", "abs", "sq", "se"), 0.0)

    def update(self, pred, gt, mask=None) -> None:
        p, g = _prepare(pred, gt, mask, self.protocol)
        ratio = np.maximum(p / g, g / p)
        diff = p - g
        s = self._sums
        s["d1"] += float((ratio < 1.25).sum())
        s["d2"] += float((ratio < 1.25**2).sum())
        s["d3"] += float((ratio < 1.25**3).sum())
        s["abs"] += float((np.abs(diff) / g).sum())
        s["sq"] += float((diff**2 / g).sum())
        s["se"] += float((diff**2).sum())
        self._n += p.size

    def result(self) -> Metrics:
        if self._n == 0:
            raise EvaluationError("no samples were evaluated")
        n, s = self._n, self._sums
        return Metrics(
            s["d1"] / n, s["d2"] / n, s["d3"] / n, s["abs"] / n, s["sq"] / n, math.sqrt(s["se"] / n), n
        )
