"""ROI statistics, linear regression, and masked percent-NRMSE.

These reproduce the validation arithmetic used for accuracy and agreement
studies: per-ROI means over labelled masks, ordinary-least-squares agreement
lines (slope, R^2), and normalized RMSE over a mask with optional exclusion
of long-T1 fluid voxels.  NRMSE is normalized by the l2 norm of the
reference over the mask and reported in percent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "RegressionResult",
    "RoiStat",
    "MaskSpec",
    "roi_means",
    "linear_regress",
    "nrmse_percent",
    "fluid_mask",
]


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    n: int


@dataclass(frozen=True)
class RoiStat:
    label: int
    count: int
    mean: float
    std: float


@dataclass(frozen=True)
class MaskSpec:
    """Fluid exclusion by T1 threshold on a reference map (ms)."""

    fluid_t1_ms: float = 3000.0

    def __post_init__(self) -> None:
        if not self.fluid_t1_ms > 0:
            raise DomainError("fluid threshold must be > 0")


def roi_means(map3d: np.ndarray, label_masks: np.ndarray, label_ids=None) -> list[RoiStat]:
    """Mean/std/count per label; requested labels with no voxels report
    count 0 so callers can exclude them downstream."""
    map3d = np.asarray(map3d, dtype=float)
    label_masks = np.asarray(label_masks)
    if map3d.shape != label_masks.shape:
        raise ShapeError(f"map {map3d.shape} and labels {label_masks.shape} differ")
    if label_ids is None:
        label_ids = [int(v) for v in np.unique(label_masks) if v != 0]
    out = []
    for lab in label_ids:
        sel = map3d[label_masks == lab]
        if sel.size == 0:
            out.append(RoiStat(int(lab), 0, float("nan"), float("nan")))
        else:
            out.append(RoiStat(int(lab), int(sel.size), float(sel.mean()), float(sel.std())))
    return out


def linear_regress(x, y) -> RegressionResult:
    """Ordinary least squares y = slope*x + intercept with R^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("regression needs two equal-length 1-D arrays")
    n = x.size
    if n < 2:
        raise DomainError("regression needs at least two points")
    sxx = float(np.sum((x - x.mean()) ** 2))
    if sxx == 0.0:
        raise DomainError("regression is degenerate: x is constant")
    slope = float(np.sum((x - x.mean()) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RegressionResult(slope, intercept, min(max(r2, 0.0), 1.0), n)


def nrmse_percent(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """100 * ||a - b||_mask / ||b||_mask; b is the reference."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not (a.shape == b.shape == mask.shape):
        raise ShapeError("nrmse needs congruent map, reference, and mask")
    if not mask.any():
        raise DomainError("nrmse mask is empty")
    ref = np.linalg.norm(b[mask])
    if ref == 0.0:
        raise DomainError("nrmse reference is zero over the mask")
    return float(100.0 * np.linalg.norm(a[mask] - b[mask]) / ref)


def fluid_mask(t1_map: np.ndarray, base_mask: np.ndarray | None = None,
               spec: MaskSpec = MaskSpec()) -> np.ndarray:
    """Voxels below the fluid T1 threshold, intersected with the base mask."""
    t1_map = np.asarray(t1_map, dtype=float)
    keep = t1_map < spec.fluid_t1_ms
    if base_mask is not None:
        base_mask = np.asarray(base_mask, dtype=bool)
        if base_mask.shape != t1_map.shape:
            raise ShapeError("base mask shape differs from the T1 map")
        keep &= base_mask
    return keep
