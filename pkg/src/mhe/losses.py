"""Training objectives: pixel-wise MSE plus one relative-height term.

The relative-height term comes in three flavours. The scale-invariant
variant penalises the variance of the residual (mean of squared residuals
minus squared mean residual), computed on raw heights because a large
share of height pixels is exactly zero. The ranking variant penalises
disagreement with ground-truth ordinal relations between sampled pixel
pairs. The multi-scale gradient variant penalises absolute forward
differences of the residual over a pyramid of block-mean downsampled
scales.

All losses are composites of tape primitives, so their gradients come from
the tape and pass finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ShapeError
from . import tensor as T
from .tensor import Tensor

DEFAULT_MSG_SCALES = (1.0, 0.5, 0.25, 0.125)

VARIANTS = ("mse_only", "si", "rank", "msg")


@dataclass
class LossConfig:
    variant: str = "mse_only"
    rank_pairs: int = 512        # pixel pairs sampled per image per step
    rank_threshold: float = 0.25  # metres; ordinal ties below this
    msg_scales: tuple[float, ...] = DEFAULT_MSG_SCALES
    rh_weight: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.rank_threshold <= 0:
            raise ValueError("rank_threshold must be > 0")
        if self.rank_pairs < 1:
            raise ValueError("rank_pairs must be >= 1")


class OrdinalPair(NamedTuple):
    """Two flat pixel indices and their ground-truth ordinal label:
    +1 if height at i exceeds j by more than the threshold, -1 for the
    reverse, 0 when the difference is within the threshold."""

    i: int
    j: int
    r: int


def label_pair(gt_i: float, gt_j: float, threshold: float) -> int:
    if gt_i - gt_j > threshold:
        return 1
    if gt_j - gt_i > threshold:
        return -1
    return 0


def sample_pairs(gt: np.ndarray, n_pairs: int, threshold: float,
                 rng: np.random.Generator) -> list[OrdinalPair]:
    """Uniformly sample pixel pairs per image and label them from gt.

    gt may be a single raster or a batch; pairs are drawn within each
    image (n_pairs per image) and indexed into the flattened array.
    """
    g = np.asarray(gt)
    if g.ndim <= 2:
        g = g.reshape(1, -1)
    else:
        g = g.reshape(g.shape[0], -1)
    per = g.shape[1]
    pairs = []
    for b in range(g.shape[0]):
        ii = rng.integers(0, per, size=n_pairs)
        jj = rng.integers(0, per, size=n_pairs)
        base = b * per
        for i, j in zip(ii, jj):
            pairs.append(OrdinalPair(base + int(i), base + int(j),
                                     label_pair(g[b, i], g[b, j], threshold)))
    return pairs


def _check_same(pred: Tensor, gt: Tensor, op: str) -> None:
    if pred.dims != gt.dims:
        raise ShapeError(f"{op}: dims {pred.dims} vs {gt.dims}")


def loss_mse(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean squared residual."""
    _check_same(pred, gt, "loss_mse")
    r = pred - gt
    return (r * r).mean()


def loss_si(pred: Tensor, gt: Tensor) -> Tensor:
    """Residual variance: mean(R^2) - mean(R)^2 with R = gt - pred.

    Invariant under adding a constant to the predictions; zero iff the
    residual is constant. This is also the SI-RMSE metric kernel.
    """
    _check_same(pred, gt, "loss_si")
    r = gt - pred
    n = r.size
    mean_sq = (r * r).mean()
    mean = T.mul(r.sum(), 1.0 / n)
    return mean_sq - mean * mean


def loss_rank(pred: Tensor, pairs: Sequence[OrdinalPair]) -> Tensor:
    """Ordinal agreement loss over pixel pairs.

    Ordered pairs pay a logistic penalty on the predicted margin in the
    labelled direction; tied pairs pay the squared predicted difference.
    """
    if len(pairs) == 0:
        raise ValueError("loss_rank: empty pair list")
    i_idx = np.array([p.i for p in pairs], dtype=np.int64)
    j_idx = np.array([p.j for p in pairs], dtype=np.int64)
    labels = np.array([p.r for p in pairs], dtype=np.int64)
    total: Tensor | None = None
    for r_val in (1, -1, 0):
        mask = labels == r_val
        if not mask.any():
            continue
        d = T.take(pred, i_idx[mask]) - T.take(pred, j_idx[mask])
        if r_val == 1:
            term = T.softplus(-d).sum()
        elif r_val == -1:
            term = T.softplus(d).sum()
        else:
            term = (d * d).sum()
        total = term if total is None else total + term
    return T.mul(total, 1.0 / len(pairs))


def loss_msg(pred: Tensor, gt: Tensor, scales: Sequence[float] = DEFAULT_MSG_SCALES) -> Tensor:
    """Multi-scale gradient matching on the residual.

    Sums |forward difference| of the residual along both spatial axes over
    the scale pyramid, normalised by the full-resolution pixel count. The
    difference drops the last column/row of each axis; scales where an
    axis has a single element contribute nothing along it.
    """
    _check_same(pred, gt, "loss_msg")
    if pred.data.ndim < 2:
        raise ShapeError("loss_msg: inputs must have spatial extents")
    r = pred - gt
    m = float(pred.size)
    total: Tensor | None = None
    for f in scales:
        rk = T.resize_avg(r, f)
        for axis in (-2, -1):
            if rk.dims[axis] < 2:
                continue
            term = T.absolute(T.diff(rk, axis)).sum()
            total = term if total is None else total + term
    if total is None:
        raise ShapeError("loss_msg: no scale produced a gradient term")
    return T.mul(total, 1.0 / m)


def loss_total(pred: Tensor, gt: Tensor, cfg: LossConfig,
               pairs: Sequence[OrdinalPair] | None = None) -> Tensor:
    """MSE plus the configured relative-height term (unit weights by default)."""
    base = loss_mse(pred, gt)
    if cfg.variant == "mse_only":
        return base
    if cfg.variant == "si":
        rh = loss_si(pred, gt)
    elif cfg.variant == "msg":
        rh = loss_msg(pred, gt, cfg.msg_scales)
    else:
        if pairs is None:
            raise ValueError("loss_total: rank variant requires sampled pairs")
        rh = loss_rank(pred, pairs)
    if cfg.rh_weight == 1.0:
        return base + rh
    return base + T.mul(rh, cfg.rh_weight)
