"""Training losses on disparity maps and benchmark-style evaluation metrics.

Spatial gradients are forward differences that are zero on the trailing
column (x) and row (y). The loss functions accept plain arrays and return
floats, or accept a :class:`Tensor` prediction and return a differentiable
scalar tensor. Pixel means run over every leading axis as well, so a
``(N, 1, H, W)`` batch averages over all ``N*H*W`` pixels.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor
from .autodiff.tensor import make_result
from .lightfield import DisparityMap

BADPIX_THRESHOLDS = (0.01, 0.03, 0.07)


@dataclass(frozen=True)
class LossWeights:
    mae: float = 1.0
    grad: float = 1.0
    normal: float = 1.0

    def __post_init__(self):
        w = (self.mae, self.grad, self.normal)
        if any(v < 0 for v in w):
            raise ValueError(f"loss weights must be non-negative, got {w}")
        if not any(v > 0 for v in w):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.mae, self.grad, self.normal)


def forward_diff(f: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(d/dx, d/dy) of ``f`` over its last two axes, zero on the trailing edge."""
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[..., :, :-1] = f[..., :, 1:] - f[..., :, :-1]
    gy[..., :-1, :] = f[..., 1:, :] - f[..., :-1, :]
    return gx, gy


def forward_diff_adjoint(ax: np.ndarray, ay: np.ndarray) -> np.ndarray:
    """Transpose of :func:`forward_diff` applied to a pair of gradient fields."""
    out = np.zeros_like(ax)
    out[..., :, 1:] += ax[..., :, :-1]
    out[..., :, :-1] -= ax[..., :, :-1]
    out[..., 1:, :] += ay[..., :-1, :]
    out[..., :-1, :] -= ay[..., :-1, :]
    return out


def normals(f: np.ndarray) -> np.ndarray:
    """Per-pixel surface normals ``(-df/dy, -df/dx, 1)``, stacked on a new last axis."""
    gx, gy = forward_diff(f)
    return np.stack([-gy, -gx, np.ones_like(f)], axis=-1)


# Each term returns (value, d value / d prediction).

def _mae_terms(d: np.ndarray, g: np.ndarray):
    diff = d - g
    n = diff.size
    return np.abs(diff).sum() / n, np.sign(diff) / n


def _grad_terms(d: np.ndarray, g: np.ndarray):
    if d.shape[-1] < 2 or d.shape[-2] < 2:
        raise ValueError(f"gradient loss needs at least 2x2 maps, got {d.shape[-2:]}")
    gx, gy = forward_diff(d - g)
    n = d.size
    value = (np.abs(gx).sum() + np.abs(gy).sum()) / n
    return value, forward_diff_adjoint(np.sign(gx) / n, np.sign(gy) / n)


def _normal_terms(d: np.ndarray, g: np.ndarray):
    if d.shape[-1] < 2 or d.shape[-2] < 2:
        raise ValueError(f"normal loss needs at least 2x2 maps, got {d.shape[-2:]}")
    dx, dy = forward_diff(d)
    gx, gy = forward_diff(g)
    nd = np.sqrt(dx * dx + dy * dy + 1.0)
    ng = np.sqrt(gx * gx + gy * gy + 1.0)
    dot = dx * gx + dy * gy + 1.0
    cos = dot / (nd * ng)
    n = d.size
    value = 1.0 - cos.sum() / n
    inv = 1.0 / (nd * ng)
    cx = (gx * inv - dot * dx * inv / (nd * nd)) * (-1.0 / n)
    cy = (gy * inv - dot * dy * inv / (nd * nd)) * (-1.0 / n)
    return value, forward_diff_adjoint(cx, cy)


def _values(a) -> np.ndarray:
    if isinstance(a, DisparityMap):
        return a.values
    if isinstance(a, Tensor):
        return a.data
    return np.asarray(a)


def _apply(term, name: str, d, g):
    gv = _values(g)
    dv = _values(d)
    if dv.shape != gv.shape:
        raise ValueError(f"{name}: prediction shape {dv.shape} != ground truth shape {gv.shape}")
    if isinstance(d, Tensor):
        value, grad = term(dv, gv.astype(dv.dtype, copy=False))

        def backward(upstream: np.ndarray):
            return (grad * upstream.reshape(()),)

        return make_result(np.asarray(value, dtype=dv.dtype), (d,), backward, name)
    value, _ = term(dv.astype(np.float64), gv.astype(np.float64))
    return float(value)


def loss_mae(d, g):
    """Mean absolute disparity error."""
    return _apply(_mae_terms, "loss_mae", d, g)


def loss_grad(d, g):
    """Mean of ``|dD/dx| + |dD/dy|`` for ``D = d - g``."""
    return _apply(_grad_terms, "loss_grad", d, g)


def loss_normal(d, g):
    """One minus the mean cosine between surface normals of ``d`` and ``g``."""
    return _apply(_normal_terms, "loss_normal", d, g)


def combined_loss(d, g, weights: LossWeights = LossWeights()):
    """Weighted sum of the MAE, gradient and normal losses; zero-weight terms are skipped."""
    terms = []
    for w, fn in zip(weights.as_tuple(), (loss_mae, loss_grad, loss_normal)):
        if w == 0:
            continue
        value = fn(d, g)
        terms.append(value * w if w != 1 else value)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------- metrics


def _masked_error(d, g, mask):
    dv = _values(d).astype(np.float64)
    gv = _values(g).astype(np.float64)
    if dv.shape != gv.shape:
        raise ValueError(f"prediction shape {dv.shape} != ground truth shape {gv.shape}")
    err = dv - gv
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != err.shape:
            raise ValueError(f"mask shape {mask.shape} != map shape {err.shape}")
        err = err[mask]
    if err.size == 0:
        raise ValueError("evaluation mask selects no pixels")
    return err


def mse_x100(d, g, mask=None) -> float:
    """100 x mean squared disparity error over the masked pixels."""
    err = _masked_error(d, g, mask)
    return float(100.0 * np.mean(err * err))


def badpix(d, g, tau: float, mask=None) -> float:
    """Fraction of masked pixels whose absolute error exceeds ``tau``."""
    if tau <= 0:
        raise ValueError(f"threshold must be positive, got {tau}")
    err = _masked_error(d, g, mask)
    return float(np.mean(np.abs(err) > tau))


CSV_HEADER = ("scene", "mse_x100", "badpix_001", "badpix_003", "badpix_007", "seconds")


@dataclass
class MetricsReport:
    scene: str
    mse_x100: float
    badpix: Dict[float, float]
    seconds: float = 0.0

    @classmethod
    def compute(cls, scene: str, d, g, mask=None, seconds: float = 0.0) -> "MetricsReport":
        return cls(scene, mse_x100(d, g, mask),
                   {t: badpix(d, g, t, mask) for t in BADPIX_THRESHOLDS}, seconds)

    @classmethod
    def mean(cls, reports: Sequence["MetricsReport"], scene: str = "mean") -> "MetricsReport":
        if not reports:
            raise ValueError("no reports to aggregate")
        return cls(scene, float(np.mean([r.mse_x100 for r in reports])),
                   {t: float(np.mean([r.badpix[t] for r in reports])) for t in BADPIX_THRESHOLDS},
                   float(np.sum([r.seconds for r in reports])))

    def csv_row(self) -> List[str]:
        return [self.scene, f"{self.mse_x100:.6f}"] + \
            [f"{self.badpix[t]:.6f}" for t in BADPIX_THRESHOLDS] + [f"{self.seconds:.3f}"]

    def text(self) -> str:
        bp = "  ".join(f"badpix({t:g})={self.badpix[t]:.4f}" for t in BADPIX_THRESHOLDS)
        return f"{self.scene}: mse_x100={self.mse_x100:.4f}  {bp}  time={self.seconds:.3f}s"


def reports_to_csv(reports: Iterable[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def reports_from_csv(text: str) -> List[MetricsReport]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError("not a metrics CSV (header mismatch)")
    out = []
    for row in rows[1:]:
        out.append(MetricsReport(row[0], float(row[1]),
                                 dict(zip(BADPIX_THRESHOLDS, map(float, row[2:5]))), float(row[5])))
    return out
