"""Segmentation quality metrics on binary voxel masks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .synthdata import MaskVolume, volume_ml


# up to this many boundary pairs a dense distance matrix beats building trees
_BRUTE_FORCE_PAIRS = 1 << 16


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: float
    precision: float
    asd_mm: float | None  # None when either mask is empty
    vol_pred_ml: float
    vol_gt_ml: float
    abvd_ml: float


def _check_dims(a: MaskVolume, b: MaskVolume) -> None:
    if a.dims != b.dims:
        raise ValueError(f"mask dims differ: {a.dims} vs {b.dims}")


def _check_spacing(a: MaskVolume, b: MaskVolume) -> None:
    if a.spacing_mm != b.spacing_mm:
        raise ValueError(f"mask spacing differs: {a.spacing_mm} vs {b.spacing_mm}")


def dice_coefficient(a: MaskVolume, b: MaskVolume) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1."""
    _check_dims(a, b)
    va, vb = a.voxels, b.voxels
    total = np.count_nonzero(va) + np.count_nonzero(vb)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(va & vb) / total


def precision(pred: MaskVolume, gt: MaskVolume) -> float:
    _check_dims(pred, gt)
    p, g = pred.voxels, gt.voxels
    n_pred = np.count_nonzero(p)
    if n_pred == 0:
        return 1.0 if not g.any() else 0.0
    return np.count_nonzero(p & g) / n_pred


def boundary_voxels(mask: MaskVolume) -> np.ndarray:
    """(x, y, z) indices of foreground voxels touching background through a face.

    Single-slice masks use in-plane 4-connectivity, volumes 6-connectivity.
    Voxels on the grid edge count as touching background.
    """
    v = mask.voxels.astype(bool)
    nz, ny, nx = v.shape
    padded = np.zeros((nz + 2, ny + 2, nx + 2), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = v
    interior = v.copy()
    steps = ((0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))
    if nz > 1:
        steps += ((1, 0, 0), (-1, 0, 0))
    for dz, dy, dx in steps:
        interior &= padded[1 + dz:1 + dz + nz, 1 + dy:1 + dy + ny, 1 + dx:1 + dx + nx]
    # argwhere gives (z, y, x); flip to (x, y, z)
    return np.argwhere(v & ~interior)[:, ::-1]


def _nearest(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(dst * spacing).query(src * spacing)
    # recompute with the same arithmetic as the dense path
    d = (src - dst[idx]) * spacing
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])


def _surface_distances(ba: np.ndarray, bb: np.ndarray, spacing: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour distances in mm, ``ba`` to ``bb`` and ``bb`` to ``ba``."""
    if len(ba) * len(bb) <= _BRUTE_FORCE_PAIRS:
        d = (ba[:, None, :] - bb[None, :, :]) * spacing
        sq = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        return np.sqrt(sq.min(axis=1)), np.sqrt(sq.min(axis=0))
    return _nearest(ba, bb, spacing), _nearest(bb, ba, spacing)


def average_surface_distance(a: MaskVolume, b: MaskVolume) -> float:
    """Symmetric mean distance (mm) between the boundary voxels of two masks."""
    _check_dims(a, b)
    _check_spacing(a, b)
    ba, bb = boundary_voxels(a), boundary_voxels(b)
    if len(ba) == 0 or len(bb) == 0:
        raise UndefinedMetricError("surface distance is undefined for an empty mask")
    d_ab, d_ba = _surface_distances(ba, bb, np.asarray(a.spacing_mm, dtype=np.float64))
    return math.fsum(d_ab.tolist() + d_ba.tolist()) / (len(d_ab) + len(d_ba))


def abvd_ml(pred: MaskVolume, gt: MaskVolume) -> float:
    _check_spacing(pred, gt)
    return abs(volume_ml(pred) - volume_ml(gt))


def case_metrics(case_id: str, pred: MaskVolume, gt: MaskVolume) -> CaseMetrics:
    try:
        asd = average_surface_distance(pred, gt)
    except UndefinedMetricError:
        asd = None
    vp, vg = volume_ml(pred), volume_ml(gt)
    return CaseMetrics(case_id, dice_coefficient(pred, gt), precision(pred, gt), asd, vp, vg, abs(vp - vg))


@dataclass(frozen=True)
class StratumSummary:
    threshold_ml: float
    n: int
    mean: float | None = None
    sd: float | None = None
    median: float | None = None
    q1: float | None = None
    q3: float | None = None

    @property
    def iqr(self) -> float | None:
        return None if self.q1 is None else self.q3 - self.q1


def stratified_dice(cases: Sequence[tuple[CaseMetrics, float]], thresholds: Sequence[float]) -> list[StratumSummary]:
    """Dice summaries over the cases whose reference volume exceeds each threshold."""
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    out = []
    for v in thresholds:
        d = np.array([m.dice for m, vol in cases if vol > v], dtype=np.float64)
        if d.size == 0:
            out.append(StratumSummary(float(v), 0))
            continue
        q1, med, q3 = np.percentile(d, [25, 50, 75])
        sd = float(np.std(d, ddof=1)) if d.size > 1 else None
        out.append(StratumSummary(float(v), int(d.size), float(d.mean()), sd, float(med), float(q1), float(q3)))
    return out


__all__ = [
    "CaseMetrics", "StratumSummary", "UndefinedMetricError", "dice_coefficient", "precision",
    "average_surface_distance", "boundary_voxels", "volume_ml", "abvd_ml", "case_metrics", "stratified_dice",
]
