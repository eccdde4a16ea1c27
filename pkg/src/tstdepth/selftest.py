"""Quick gradient and oracle checks, runnable from the command line."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .gradcheck import check_gradients
from .loss_metrics import silog_loss
from .model import build_model
from .profiler import count_params, model_macs_discrepancy
from .tensor import Tensor, matmul, precision, sigmoid, softmax


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.value <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<32} {self.value:.3e} (tol {self.tolerance:g})"


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int = 1) -> np.ndarray:
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, g * cg + ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[b, oc, i, j] = acc
    return out


def _grad_checks(rng) -> list[tuple[str, Callable[[], float]]]:
    def r(*shape):
        return rng.standard_normal(shape)

    pos = rng.uniform(0.5, 3.0, (1, 1, 4, 4))
    gt = rng.uniform(0.5, 3.0, (1, 1, 4, 4))
    rm, rv = np.zeros(3), np.ones(3)
    return [
        ("grad conv2d 3x3 s2", lambda: check_gradients(lambda x, w: ops.conv2d(x, w, stride=2, padding=1), [r(2, 3, 6, 6), r(5, 3, 3, 3)])),
        ("grad conv2d depthwise", lambda: check_gradients(lambda x, w: ops.conv2d(x, w, padding=1, groups=4), [r(2, 4, 5, 5), r(4, 1, 3, 3)])),
        ("grad conv2d pointwise", lambda: check_gradients(lambda x, w, b: ops.conv2d(x, w, b), [r(2, 4, 3, 3), r(6, 4, 1, 1), r(6)])),
        ("grad batch_norm2d train", lambda: check_gradients(lambda x, g, b: ops.batch_norm2d(x, g, b, rm.copy(), rv.copy(), True), [r(3, 3, 2, 2), r(3), r(3)])),
        ("grad avg_pool_to", lambda: check_gradients(lambda x: ops.avg_pool_to(x, (2, 2)), [r(1, 2, 4, 6)])),
        ("grad bilinear_upsample", lambda: check_gradients(lambda x: ops.bilinear_upsample(x, (5, 7)), [r(1, 2, 2, 3)])),
        ("grad softmax", lambda: check_gradients(lambda x: softmax(x, axis=-1), [r(3, 5)])),
        ("grad matmul", lambda: check_gradients(matmul, [r(2, 3, 4), r(2, 4, 5)])),
        ("grad sigmoid", lambda: check_gradients(sigmoid, [r(4, 4)])),
        ("grad silog wrt pred", lambda: check_gradients(lambda p: silog_loss(p, gt), [pos])),
    ]


def run_selftest(verbose: Callable[[str], None] = print) -> bool:
    rng = np.random.default_rng(0)
    results = []
    t0 = time.perf_counter()
    for name, fn in _grad_checks(rng):
        results.append(CheckResult(name, fn(), 1e-3))
        verbose(results[-1].line())

    x, w = rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((6, 4, 3, 3))
    with precision(np.float64):
        got = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    results.append(CheckResult("oracle conv2d vs loops", float(np.abs(got - naive_conv2d(x, w, 2, 1)).max()), 1e-10))
    verbose(results[-1].line())

    model = build_model("tst-s", seed=0)
    results.append(CheckResult("oracle MACs tst-s 64x64", float(model_macs_discrepancy(model, (64, 64))), 0))
    verbose(results[-1].line())
    params = count_params(model)
    results.append(CheckResult("params rows sum to total", float(abs(params.total_params - model.num_parameters())), 0))
    verbose(results[-1].line())

    ok = all(r.passed for r in results)
    verbose(f"{sum(r.passed for r in results)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return ok
