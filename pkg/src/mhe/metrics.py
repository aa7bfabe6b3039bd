"""Evaluation metrics: MAE, RMSE, SI-RMSE, MSGE over a test split.

SI-RMSE and MSGE reuse the loss kernels directly (same code path, so the
values agree bit for bit); MAE and RMSE are plain residual statistics.
A split is scored per image first, then averaged unweighted across images.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError
from .losses import DEFAULT_MSG_SCALES, loss_msg, loss_si
from .tensor import Tensor


def _check(pred: np.ndarray, gt: np.ndarray, op: str) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"{op}: shape {pred.shape} vs {gt.shape}")


def metric_mae(pred: np.ndarray, gt: np.ndarray) -> float:
    _check(pred, gt, "mae")
    return float(np.mean(np.abs(gt - pred)))


def metric_rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    _check(pred, gt, "rmse")
    return float(np.sqrt(np.mean((gt - pred) ** 2)))


def metric_si_rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    """Residual-variance metric; shares the loss kernel bit for bit."""
    return float(loss_si(Tensor(pred), Tensor(gt)).data)


def metric_msge(pred: np.ndarray, gt: np.ndarray,
                scales: Sequence[float] = DEFAULT_MSG_SCALES) -> float:
    """Multi-scale gradient error; shares the loss kernel bit for bit."""
    return float(loss_msg(Tensor(pred), Tensor(gt), scales).data)


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    si_rmse: float
    msge: float
    n_images: int

    def values(self) -> tuple[float, float, float, float]:
        return (self.mae, self.rmse, self.si_rmse, self.msge)

    def csv_row(self, dataset: str, variant: str, pct: float, seed: int) -> str:
        vals = ",".join(repr(v) for v in self.values())
        return f"{dataset},{variant},{pct:g},{seed},{vals}"

    def text_table(self) -> str:
        head = f"{'MAE':>10} {'RMSE':>10} {'SI-RMSE':>10} {'MSGE':>10} {'images':>7}"
        row = (f"{self.mae:>10.4f} {self.rmse:>10.4f} {self.si_rmse:>10.4f} "
               f"{self.msge:>10.4f} {self.n_images:>7d}")
        return head + "\n" + row


CSV_HEADER = "dataset,variant,pct,seed,mae,rmse,si_rmse,msge"


def score_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float, float]:
    return (metric_mae(pred, gt), metric_rmse(pred, gt),
            metric_si_rmse(pred, gt), metric_msge(pred, gt))


def evaluate_pairs(predict: Callable[[np.ndarray], np.ndarray],
                   pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> MetricsReport:
    """Score a predictor over (image, height) raster pairs, in order."""
    if len(pairs) == 0:
        raise ValueError("evaluate_pairs: need at least one pair")
    acc = np.zeros(4)
    for img, hgt in pairs:
        pred = np.asarray(predict(img))
        acc += np.asarray(score_pair(pred, hgt))
    acc /= len(pairs)
    return MetricsReport(mae=float(acc[0]), rmse=float(acc[1]),
                         si_rmse=float(acc[2]), msge=float(acc[3]),
                         n_images=len(pairs))


def evaluate_split(predict, manifest, split: str = "test") -> MetricsReport:
    """Evaluate over a dataset split listed in a manifest (see synthdata).

    ``predict`` maps an image raster (3,H,W) to a height raster (1,H,W).
    Images are processed in manifest order and the per-image metrics are
    averaged unweighted.
    """
    from . import hmt  # local import: metrics stays usable without file IO

    entries = manifest.split_pairs(split)
    if not entries:
        raise ValueError(f"evaluate_split: split {split!r} is empty")
    loaded = [(hmt.load(img), hmt.load(hgt)) for img, hgt in entries]
    for img, hgt in loaded:
        if img.shape[-2:] != hgt.shape[-2:]:
            raise ShapeError(f"image {img.shape} vs height {hgt.shape}")
    return evaluate_pairs(predict, loaded)
