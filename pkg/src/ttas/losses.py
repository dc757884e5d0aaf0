"""Confidence-thresholded pseudo-labels, the assistant's KL loss and the Dice loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import EPS, EmptyReductionError, ShapeError, Tensor

PSEUDO_MODES = ("two_sided", "paper_literal")


class EmptyPseudoLabelError(EmptyReductionError):
    """Every voxel of a pseudo-labelled batch was ignored."""


@dataclass(frozen=True)
class PseudoLabelBatch:
    soft_labels: np.ndarray
    keep_mask: np.ndarray
    tau_used: float

    @property
    def kept(self) -> int:
        return int(self.keep_mask.sum())

    @property
    def kept_fraction(self) -> float:
        return self.kept / self.keep_mask.size


@dataclass(frozen=True)
class TauSchedule:
    kind: str = "constant"
    tau_start: float = 0.7
    tau_end: float = 0.7
    total_epochs: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "linear_ramp"):
            raise ValueError(f"unknown tau schedule kind {self.kind!r}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        ends = (self.tau_start,) if self.kind == "constant" else (self.tau_start, self.tau_end)
        for t in ends:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"tau {t} outside (0, 1]")


def tau_at_epoch(schedule: TauSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if schedule.kind == "constant" or schedule.total_epochs == 1:
        return schedule.tau_start
    frac = epoch / (schedule.total_epochs - 1)
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac


def make_pseudo_labels(teacher_probs, tau: float, mode: str = "two_sided") -> PseudoLabelBatch:
    """Keep voxels whose teacher confidence exceeds ``tau``.

    ``two_sided`` measures confidence as max(p, 1 - p), so confident background
    survives too; ``paper_literal`` keeps only voxels with p > tau. Kept voxels
    keep the soft probability as their label.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    p = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, dtype=np.float64)
    if mode == "two_sided":
        keep = np.maximum(p, 1.0 - p) > tau
    elif mode == "paper_literal":
        keep = p > tau
    else:
        raise ValueError(f"unknown pseudo-label mode {mode!r}")
    return PseudoLabelBatch(p.copy(), keep, float(tau))


def kl_loss(teacher_probs, assistant_probs: Tensor, keep_mask=None) -> Tensor:
    """Mean two-class KL(teacher || assistant) over kept voxels.

    The teacher side is a constant; gradients flow into ``assistant_probs`` only.
    Zero * log(0) is taken as 0 for the teacher entropy term.
    """
    q = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, dtype=np.float64)
    r = T.as_tensor(assistant_probs)
    if q.shape != r.shape:
        raise ShapeError(f"teacher shape {q.shape} != assistant shape {r.shape}")
    if keep_mask is None:
        keep_mask = np.ones(q.shape, dtype=bool)
    keep_mask = np.asarray(keep_mask, dtype=bool)
    if not keep_mask.any():
        raise EmptyPseudoLabelError("no voxels survived the confidence threshold")
    q0 = 1.0 - q
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_entropy = np.where(q > 0, q * np.log(q), 0.0) + np.where(q0 > 0, q0 * np.log(q0), 0.0)
    r_c = T.clamp(r, EPS, 1.0 - EPS)
    cross = T.mul(q, T.log(r_c)) + T.mul(q0, T.log(1.0 - r_c))
    per_voxel = T.sub(neg_entropy, cross)
    return T.mean(per_voxel, mask=keep_mask)


def dice_loss(ground_truth, prediction_probs: Tensor, mask=None, eps: float = EPS) -> Tensor:
    """Soft Dice loss ``1 - 2*sum(y*p) / (sum(y^2) + sum(p^2) + eps)``.

    With ``mask`` only the selected voxels enter the sums.
    """
    y = ground_truth.data if isinstance(ground_truth, Tensor) else np.asarray(ground_truth, dtype=np.float64)
    p = T.as_tensor(prediction_probs)
    if y.shape != p.shape:
        raise ShapeError(f"ground truth shape {y.shape} != prediction shape {p.shape}")
    inter = T.sum_(T.mul(y, p), mask=mask)
    y_sq = float(np.sum(y[mask] ** 2)) if mask is not None else float(np.sum(y * y))
    p_sq = T.sum_(T.power(p, 2), mask=mask)
    return 1.0 - 2.0 * inter / (p_sq + (y_sq + eps))
