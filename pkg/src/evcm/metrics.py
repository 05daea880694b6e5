"""Depth and disparity evaluation with optional scale alignment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DepthMap, EventSlice, check_same_shape, write_csv

GRID_PER_DECADE = 64
GRID_DECADES = 3


class EmptySelectionError(ValueError):
    pass


def _select(pred: DepthMap, gt: DepthMap, mask=None):
    check_same_shape(pred, gt)
    sel = gt.mask & pred.mask
    if mask is not None:
        check_same_shape(pred, mask)
        sel = sel & np.asarray(mask, bool)
    if not sel.any():
        raise EmptySelectionError("no pixel is valid in both maps and the mask")
    return sel


def mae_depth(pred: DepthMap, gt: DepthMap, cutoff=np.inf, mask=None) -> float:
    """Mean absolute depth error over valid pixels with ground truth within ``cutoff``."""
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    sel = _select(pred, gt, mask) & (gt.d <= cutoff)
    if not sel.any():
        raise EmptySelectionError(f"no valid pixel with depth <= {cutoff}")
    return float(np.mean(np.abs(pred.d[sel] - gt.d[sel])))


def abs_rel(pred: DepthMap, gt: DepthMap, mask=None) -> float:
    """Mean of ``|pred - gt| / gt``."""
    sel = _select(pred, gt, mask)
    return float(np.mean(np.abs(pred.d[sel] - gt.d[sel]) / gt.d[sel]))


def scale_grid(center) -> np.ndarray:
    """Log-spaced candidates spanning ``GRID_DECADES`` decades around ``center``."""
    half = GRID_PER_DECADE * GRID_DECADES // 2
    return center * 10.0 ** (np.arange(-half, half + 1) / GRID_PER_DECADE)


def scale_align(pred: DepthMap, ref: DepthMap, mode="approx", mask=None) -> float:
    """Factor ``s`` so that ``s * pred`` best matches ``ref``.

    ``approx`` is the ratio of medians; ``best`` searches a log grid centred on
    that ratio for the lowest MAE (the first minimum wins ties).
    """
    sel = _select(pred, ref, mask)
    p, r = pred.d[sel], ref.d[sel]
    approx = float(np.median(r) / np.median(p))
    if mode == "approx":
        return approx
    if mode != "best":
        raise ValueError(f"unknown alignment mode {mode!r}")
    grid = scale_grid(approx)
    errors = np.abs(grid[:, None] * p[None, :] - r[None, :]).mean(axis=1)
    return float(grid[int(np.argmin(errors))])


def scaled(depth: DepthMap, s) -> DepthMap:
    return DepthMap(depth.d * s, depth.mask)


def depth_to_disparity(depth: DepthMap, focal, baseline) -> np.ndarray:
    """``focal * baseline / depth``; invalid pixels get NaN."""
    return np.where(depth.mask, focal * baseline / depth.d, np.nan)


@dataclass(frozen=True)
class DisparityMetrics:
    one_pe: float  # percent of pixels off by more than 1 px
    two_pe: float
    mae: float
    rmse: float

    def as_tuple(self):
        return (self.one_pe, self.two_pe, self.mae, self.rmse)


def disparity_metrics(pred_disp, gt_disp, valid=None) -> DisparityMetrics:
    pred_disp = np.asarray(pred_disp, dtype=np.float64)
    gt_disp = np.asarray(gt_disp, dtype=np.float64)
    if pred_disp.shape != gt_disp.shape:
        raise ValueError(f"shape mismatch {pred_disp.shape} vs {gt_disp.shape}")
    sel = np.isfinite(gt_disp) & np.isfinite(pred_disp)
    if valid is not None:
        sel &= np.asarray(valid, bool)
    if not sel.any():
        raise EmptySelectionError("no valid disparity pixel")
    err = np.abs(pred_disp[sel] - gt_disp[sel])
    return DisparityMetrics(
        100.0 * float(np.mean(err > 1.0)),
        100.0 * float(np.mean(err > 2.0)),
        float(err.mean()),
        float(np.sqrt(np.mean(err**2))),
    )


def event_mask(slice_: EventSlice) -> np.ndarray:
    """Pixels that received at least one event."""
    mask = np.zeros(slice_.shape, bool)
    mask[slice_.y, slice_.x] = True
    return mask


REPORT_COLUMNS = ("mode", "cutoff", "n_valid", "scale", "mae", "abs_rel",
                  "one_pe", "two_pe", "disp_mae", "disp_rmse")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def get(self, mode, cutoff) -> dict:
        for r in self.rows:
            if r["mode"] == mode and r["cutoff"] == cutoff:
                return r
        raise KeyError((mode, cutoff))

    def to_csv(self, path) -> None:
        cols = [c for c in REPORT_COLUMNS if any(c in r for r in self.rows)]
        write_csv(path, self.rows, cols)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.rows, indent=2))


def evaluate(pred: DepthMap, gt: DepthMap, cutoffs=(10.0, 20.0, 30.0), events: EventSlice | None = None,
             align="approx", focal=None, baseline=None) -> EvalReport:
    """Metrics in event-masked mode (when ``events`` is given) and dense mode.

    The scale factor is fitted per mode over all of that mode's valid pixels
    (``align=None`` keeps the prediction as is). Disparity metrics are added
    when both ``focal`` and ``baseline`` are given. Cutoffs that select no pixel
    are skipped.
    """
    modes = [("dense", None)]
    if events is not None:
        modes.insert(0, ("event_masked", event_mask(events)))
    report = EvalReport()
    for mode, mask in modes:
        try:
            sel = _select(pred, gt, mask)
        except EmptySelectionError:
            continue
        s = 1.0 if align is None else scale_align(pred, gt, align, mask)
        aligned = scaled(pred, s)
        extra = {}
        if focal is not None and baseline is not None:
            dm = disparity_metrics(depth_to_disparity(aligned, focal, baseline),
                                   depth_to_disparity(gt, focal, baseline), sel)
            extra = dict(zip(("one_pe", "two_pe", "disp_mae", "disp_rmse"), dm.as_tuple()))
        for cutoff in (*cutoffs, np.inf):
            within = sel & (gt.d <= cutoff)
            if not within.any():
                continue
            report.rows.append({
                "mode": mode, "cutoff": float(cutoff), "n_valid": int(within.sum()), "scale": s,
                "mae": mae_depth(aligned, gt, cutoff, mask),
                "abs_rel": abs_rel(aligned, gt, within),
                **extra,
            })
    return report
