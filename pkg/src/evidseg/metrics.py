"""Segmentation accuracy and uncertainty-quality metrics.

Dice overlap (per class and whole-tumor), voxel-mean normalized entropy
(NE), 10-bin expected calibration error (ECE) on max-probability
confidence, and uncertainty-error overlap (UEO): the Dice score between
the thresholded uncertainty map and the prediction-error map, reported
both as the best value over a threshold sweep and at the fixed threshold
0.5 so no single cherry-picked threshold decides the comparison.

All reductions are plain deterministic sums over every voxel of the
volume.  For a head with no uncertainty channel, per-voxel normalized
entropy stands in as the uncertainty surrogate so UEO stays comparable
across heads; the report records which source was used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .phantom import merge_whole_tumor
from .subjective_logic import argmax_class
from .volume import LabelVolume, Volume

__all__ = [
    "MetricsReport",
    "dice_score",
    "normalized_entropy",
    "expected_calibration_error",
    "uncertainty_error_overlap",
    "evaluate",
]

UEO_THRESHOLDS = tuple(i / 100.0 for i in range(1, 100))


def _field(prob: Volume | np.ndarray) -> np.ndarray:
    """Accept a Volume or a raw (c, z, y, x) array at its native dtype.

    Raw float64 arrays keep full precision, so formula-level checks are
    not limited by the float32 storage of Volume.
    """
    data = prob.data if isinstance(prob, Volume) else np.asarray(prob)
    if data.ndim != 4:
        raise ValueError(f"expected a (c, z, y, x) field, got shape {data.shape}")
    return data


@dataclass
class MetricsReport:
    """One evaluation outcome; serializes to a flat dict / CSV row."""

    dice_whole_tumor: float
    dice_per_class: tuple[float, ...]
    ne: float
    ece: float
    ueo_best: float
    ueo_best_threshold: float
    ueo_at_half: float
    mean_uncertainty: float
    calibration_bins: list[tuple[float, float, float, float, int]]
    ueo_sweep: list[tuple[float, float]]
    uncertainty_source: str = "evidential"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Full nested form, JSON-serializable."""
        d = {
            "dice_whole_tumor": self.dice_whole_tumor,
            "ne": self.ne,
            "ece": self.ece,
            "ueo_best": self.ueo_best,
            "ueo_best_threshold": self.ueo_best_threshold,
            "ueo_at_half": self.ueo_at_half,
            "mean_uncertainty": self.mean_uncertainty,
            "uncertainty_source": self.uncertainty_source,
            "calibration_bins": [list(b) for b in self.calibration_bins],
            "ueo_sweep": [list(s) for s in self.ueo_sweep],
        }
        for i, v in enumerate(self.dice_per_class):
            d[f"dice_class_{i}"] = v
        d.update(self.extra)
        return d

    def csv_row(self) -> dict:
        """Scalar metrics only, for tabular output."""
        row = {
            "dice_whole_tumor": self.dice_whole_tumor,
            "ne": self.ne,
            "ece": self.ece,
            "ueo_best": self.ueo_best,
            "ueo_best_threshold": self.ueo_best_threshold,
            "ueo_at_half": self.ueo_at_half,
            "mean_uncertainty": self.mean_uncertainty,
        }
        for i, v in enumerate(self.dice_per_class):
            row[f"dice_class_{i}"] = v
        for k, v in self.extra.items():
            if isinstance(v, (int, float)):
                row[k] = v
        return row


def dice_score(pred: LabelVolume, gt: LabelVolume) -> float:
    """2|P&G| / (|P|+|G|) on binary masks; both empty counts as 1."""
    if pred.dims != gt.dims:
        raise ValueError(f"dims mismatch: {pred.dims} vs {gt.dims}")
    p = pred.data != 0
    g = gt.data != 0
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def normalized_entropy(prob: Volume | np.ndarray) -> float:
    """Voxel-mean Shannon entropy over classes, scaled to [0,1] by ln C."""
    return float(_entropy_map(prob).mean())


def _entropy_map(prob: Volume | np.ndarray) -> np.ndarray:
    p = _field(prob).astype(np.float64)
    plogp = np.where(p > 0.0, p * np.log(np.maximum(p, 1e-300)), 0.0)
    return -plogp.sum(axis=0) / np.log(p.shape[0])


def expected_calibration_error(
    prob: Volume | np.ndarray, gt: LabelVolume, bins: int = 10
) -> tuple[float, list[tuple[float, float, float, float, int]]]:
    """10-bin (default) equal-width ECE over (0,1], right-closed edges.

    A voxel's confidence is its max class probability; it lands in bin
    b when conf is in (b/bins, (b+1)/bins].  Returns the scalar and the
    per-bin detail (lo, hi, mean confidence, accuracy, count); empty bins
    report zeros.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    p = _field(prob)
    if p.shape[1:] != gt.data.shape:
        raise ValueError(f"dims mismatch: {p.shape[1:]} vs {gt.data.shape}")
    conf = p.max(axis=0).astype(np.float64).reshape(-1)
    correct = (np.argmax(p, axis=0) == gt.data.astype(np.int64)).reshape(-1)
    idx = np.ceil(conf * bins).astype(np.int64) - 1
    idx = np.clip(idx, 0, bins - 1)
    n = conf.size
    ece = 0.0
    detail = []
    for b in range(bins):
        mask = idx == b
        count = int(mask.sum())
        lo, hi = b / bins, (b + 1) / bins
        if count == 0:
            detail.append((lo, hi, 0.0, 0.0, 0))
            continue
        mean_conf = float(conf[mask].mean())
        acc = float(correct[mask].mean())
        detail.append((lo, hi, mean_conf, acc, count))
        ece += (count / n) * abs(acc - mean_conf)
    return float(ece), detail


def uncertainty_error_overlap(
    uncertainty: Volume | np.ndarray, pred: LabelVolume, gt: LabelVolume
) -> tuple[float, float, float, list[tuple[float, float]]]:
    """Dice between thresholded uncertainty and the error map, swept.

    Thresholds tau = 0.01 .. 0.99; U_tau = (u > tau), E = (pred != gt).
    Returns (best value, smallest best tau, value at tau = 0.5, sweep).
    """
    uf = _field(uncertainty)
    if uf.shape[0] != 1:
        raise ValueError("uncertainty must be single-channel")
    if not (uf.shape[1:] == pred.data.shape == gt.data.shape):
        raise ValueError("dims mismatch between uncertainty, pred, gt")
    u = uf[0].astype(np.float64)
    err = pred.data != gt.data
    n_err = int(err.sum())
    sweep = []
    best, best_tau, at_half = -1.0, 0.0, 1.0
    for tau in UEO_THRESHOLDS:
        mask = u > tau
        denom = int(mask.sum()) + n_err
        val = 1.0 if denom == 0 else 2.0 * int((mask & err).sum()) / denom
        sweep.append((tau, val))
        if val > best:
            best, best_tau = val, tau
        if abs(tau - 0.5) < 1e-9:
            at_half = val
    return best, best_tau, at_half, sweep


def evaluate(
    prob: Volume,
    uncertainty: Volume | None,
    gt: LabelVolume,
    classes: int,
) -> MetricsReport:
    """Full report for one volume.

    Per-class Dice is one-vs-rest on the argmax prediction; whole-tumor
    Dice merges classes {1,2,3} on both sides; NE and ECE run over all
    classes; UEO compares uncertainty against the whole-tumor error map.
    When ``uncertainty`` is None the per-voxel normalized entropy of the
    probabilities is substituted (recorded in ``uncertainty_source``).
    """
    if prob.channels != classes:
        raise ValueError(f"prob has {prob.channels} channels, expected {classes}")
    pred = argmax_class(prob)
    per_class = tuple(
        dice_score(
            LabelVolume(pred.dims, (pred.data == n).astype(np.uint8)),
            LabelVolume(gt.dims, (gt.data == n).astype(np.uint8)),
        )
        for n in range(classes)
    )
    pred_wt = merge_whole_tumor(pred)
    gt_wt = merge_whole_tumor(gt)
    dice_wt = dice_score(pred_wt, gt_wt)

    ne = normalized_entropy(prob)
    ece, bins_detail = expected_calibration_error(prob, gt)

    if uncertainty is None:
        u = Volume(prob.dims, 1, _entropy_map(prob)[None].astype(np.float32))
        source = "entropy_surrogate"
    else:
        u = uncertainty
        source = "evidential"
    best, best_tau, at_half, sweep = uncertainty_error_overlap(u, pred_wt, gt_wt)

    return MetricsReport(
        dice_whole_tumor=dice_wt,
        dice_per_class=per_class,
        ne=ne,
        ece=ece,
        ueo_best=best,
        ueo_best_threshold=best_tau,
        ueo_at_half=at_half,
        mean_uncertainty=float(u.data.astype(np.float64).mean()),
        calibration_bins=bins_detail,
        ueo_sweep=sweep,
        uncertainty_source=source,
    )
