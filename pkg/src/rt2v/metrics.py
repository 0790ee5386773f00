"""Retrieval-rank and mask-quality metrics plus the evaluation report.

Rank metrics assume exactly one relevant video per query, so average
precision at K collapses to 1/rank when the hit is inside the cutoff.
Mask quality pairs region overlap (intersection over union) with a
boundary F-measure under a diagonal-proportional pixel tolerance.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from .masks import MaskBitmap

__all__ = [
    "DEFAULT_K_VALUES",
    "recall_at_k",
    "median_rank",
    "mean_rank",
    "ap_at_k",
    "mean_ap",
    "region_similarity",
    "boundary_map",
    "boundary_tolerance",
    "contour_accuracy",
    "video_jf",
    "QueryOutcome",
    "MetricReport",
    "compute_report",
]

DEFAULT_K_VALUES = (1, 5, 10, 50, 100)


def _check_ranks(ranks: Sequence[int]) -> Sequence[int]:
    if not ranks:
        raise ValueError("no ranks to aggregate")
    for r in ranks:
        if not isinstance(r, int) or isinstance(r, bool) or r < 1:
            raise ValueError(f"ranks are 1-based positive integers, got {r!r}")
    return ranks


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    """Fraction of queries whose relevant video sits in the top k."""
    _check_ranks(ranks)
    if k < 1:
        raise ValueError(f"k={k} must be positive")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def median_rank(ranks: Sequence[int]) -> float:
    return float(statistics.median(_check_ranks(ranks)))


def mean_rank(ranks: Sequence[int]) -> float:
    _check_ranks(ranks)
    return sum(ranks) / len(ranks)


def ap_at_k(ranks: Sequence[int], k: int) -> float:
    """Average precision at k with one relevant item: mean of 1/rank cut at k."""
    _check_ranks(ranks)
    if k < 1:
        raise ValueError(f"k={k} must be positive")
    return sum(1.0 / r if r <= k else 0.0 for r in ranks) / len(ranks)


def mean_ap(ranks: Sequence[int], k_values: Sequence[int] = DEFAULT_K_VALUES) -> float:
    """Mean of ap_at_k over the configured cutoffs."""
    if not k_values:
        raise ValueError("k_values is empty")
    return sum(ap_at_k(ranks, k) for k in k_values) / len(k_values)


def _check_same_shape(pred: MaskBitmap, gt: MaskBitmap) -> None:
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise ValueError(
            f"mask shapes differ: {pred.width}x{pred.height} vs {gt.width}x{gt.height}")


def region_similarity(pred: MaskBitmap, gt: MaskBitmap) -> float:
    """Intersection over union; two empty masks agree perfectly."""
    _check_same_shape(pred, gt)
    intersection = int(np.logical_and(pred.bits, gt.bits).sum())
    union = int(np.logical_or(pred.bits, gt.bits).sum())
    if union == 0:
        return 1.0
    return intersection / union


def boundary_map(mask: MaskBitmap) -> np.ndarray:
    """Foreground pixels with a 4-neighbor background or on the image edge."""
    bits = mask.bits
    padded = np.zeros((bits.shape[0] + 2, bits.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = bits
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return bits & ~interior


def boundary_tolerance(width: int, height: int) -> int:
    """Default matching tolerance: ceil of 0.8% of the image diagonal."""
    return math.ceil(0.008 * math.hypot(width, height))


def contour_accuracy(pred: MaskBitmap, gt: MaskBitmap,
                     tolerance: int | None = None) -> float:
    """Boundary F-measure under a pixel distance tolerance.

    Precision counts predicted boundary pixels within tolerance of the
    ground-truth boundary (recall symmetrically); both boundaries empty
    scores 1, exactly one empty scores 0.
    """
    _check_same_shape(pred, gt)
    tol = boundary_tolerance(pred.width, pred.height) if tolerance is None else tolerance
    if tol < 0:
        raise ValueError(f"tolerance={tol} must be non-negative")
    pred_b = boundary_map(pred)
    gt_b = boundary_map(gt)
    pred_count = int(pred_b.sum())
    gt_count = int(gt_b.sum())
    if pred_count == 0 and gt_count == 0:
        return 1.0
    if pred_count == 0 or gt_count == 0:
        return 0.0
    dist_to_gt = distance_transform_edt(~gt_b)
    dist_to_pred = distance_transform_edt(~pred_b)
    precision = float((dist_to_gt[pred_b] <= tol).sum()) / pred_count
    recall = float((dist_to_pred[gt_b] <= tol).sum()) / gt_count
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


MaskTable = Mapping[tuple[int, int], MaskBitmap]  # (object_id, frame_index) -> mask


def video_jf(pred_masks: MaskTable, gt_masks: MaskTable) -> tuple[float, float]:
    """Mean region and boundary scores over ground-truth (object, frame) pairs.

    A pair with no prediction contributes zero to both means. An empty
    ground truth is vacuously perfect.
    """
    if not gt_masks:
        return 1.0, 1.0
    j_total = 0.0
    f_total = 0.0
    for pair in gt_masks:
        pred = pred_masks.get(pair)
        if pred is None:
            continue
        j_total += region_similarity(pred, gt_masks[pair])
        f_total += contour_accuracy(pred, gt_masks[pair])
    n = len(gt_masks)
    return j_total / n, f_total / n


@dataclass(frozen=True)
class QueryOutcome:
    """Per-query evaluation row: rank of the relevant video plus mask scores."""

    query_id: str
    rank: int
    j: float
    f: float


@dataclass(frozen=True)
class MetricReport:
    k_values: tuple[int, ...]
    recall: dict[int, float]
    mdr: float
    mnr: float
    ap: dict[int, float]
    map: float
    mean_j: float
    mean_f: float
    outcomes: tuple[QueryOutcome, ...]

    def to_obj(self) -> dict:
        return {
            "k_values": list(self.k_values),
            "recall": {str(k): self.recall[k] for k in self.k_values},
            "median_rank": self.mdr,
            "mean_rank": self.mnr,
            "ap": {str(k): self.ap[k] for k in self.k_values},
            "map": self.map,
            "mean_j": self.mean_j,
            "mean_f": self.mean_f,
            "queries": [
                {"query_id": o.query_id, "rank": o.rank, "j": o.j, "f": o.f}
                for o in self.outcomes
            ],
        }

    def format_table(self) -> str:
        lines = ["metric" + "".join(f"{f'@{k}':>10}" for k in self.k_values)]
        lines.append("recall" + "".join(f"{self.recall[k]:>10.4f}" for k in self.k_values))
        lines.append("ap    " + "".join(f"{self.ap[k]:>10.4f}" for k in self.k_values))
        lines.append(f"map={self.map:.4f}  mdr={self.mdr:.1f}  mnr={self.mnr:.2f}  "
                     f"mean_j={self.mean_j:.4f}  mean_f={self.mean_f:.4f}")
        return "\n".join(lines)


def compute_report(outcomes: Sequence[QueryOutcome],
                   k_values: Sequence[int] = DEFAULT_K_VALUES) -> MetricReport:
    if not outcomes:
        raise ValueError("no query outcomes to report")
    ranks = [o.rank for o in outcomes]
    return MetricReport(
        k_values=tuple(k_values),
        recall={k: recall_at_k(ranks, k) for k in k_values},
        mdr=median_rank(ranks),
        mnr=mean_rank(ranks),
        ap={k: ap_at_k(ranks, k) for k in k_values},
        map=mean_ap(ranks, k_values),
        mean_j=sum(o.j for o in outcomes) / len(outcomes),
        mean_f=sum(o.f for o in outcomes) / len(outcomes),
        outcomes=tuple(outcomes),
    )
