"""Segmentation metrics: per-class IoU with global accumulation, mIoU
aggregates, and the per-session result record."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numkit as nk


def iou(pred: np.ndarray, gt: np.ndarray, class_id: int):
    """Intersection over union for one class's pixels.

    Returns None when the class appears in neither map (excluded from
    means rather than counted as 0 or 1).
    """
    if pred.shape != gt.shape:
        raise nk.DimensionError(f"label map extents differ: {pred.shape} vs {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return None
    return float(np.count_nonzero(p & g) / union)


def miou(values) -> float | None:
    """Unweighted mean over defined per-class IoU values."""
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


class IouAccumulator:
    """Global per-class intersection/union over a whole query set."""

    def __init__(self, class_ids):
        self.inter = {cid: 0 for cid in class_ids}
        self.union = {cid: 0 for cid in class_ids}

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise nk.DimensionError("label map extents differ")
        for cid in self.inter:
            p = pred == cid
            g = gt == cid
            self.inter[cid] += int(np.count_nonzero(p & g))
            self.union[cid] += int(np.count_nonzero(p | g))

    def per_class(self) -> dict[int, float | None]:
        return {
            cid: (self.inter[cid] / self.union[cid] if self.union[cid] else None)
            for cid in self.inter
        }


@dataclass
class SessionResult:
    session_id: int
    per_class_iou: dict[int, float | None]
    base_miou: float | None
    new_miou: float | None
    old_miou: float | None  # classes from earlier incremental sessions
    mean_miou: float | None
    ms_per_frame: float | None = None


@dataclass
class RunResult:
    run_seed: int
    sessions: list[SessionResult] = field(default_factory=list)


def summarize_session(
    session_id: int,
    per_class: dict[int, float | None],
    base_ids,
    new_ids,
    old_ids,
    ms_per_frame: float | None = None,
) -> SessionResult:
    return SessionResult(
        session_id=session_id,
        per_class_iou=dict(per_class),
        base_miou=miou(per_class[c] for c in base_ids),
        new_miou=miou(per_class[c] for c in new_ids),
        old_miou=miou(per_class[c] for c in old_ids) if old_ids else None,
        mean_miou=miou(per_class.values()),
        ms_per_frame=ms_per_frame,
    )
