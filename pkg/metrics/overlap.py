"""
Overlap metrics between a predicted mask A and a ground-truth mask M.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np


class MetricError(ValueError):
    """Raised for metric inputs that cannot be compared."""


def _binary_pair(a: np.ndarray, m: np.ndarray):
    a = np.asarray(a)
    m = np.asarray(m)
    if a.shape != m.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {m.shape}")
    return a.astype(bool), m.astype(bool)


def dice(a: np.ndarray, m: np.ndarray) -> float:
    """2|A∩M| / (|A| + |M|); 1 when both masks are empty."""
    a, m = _binary_pair(a, m)
    total = int(a.sum()) + int(m.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & m).sum()) / total


def jaccard(a: np.ndarray, m: np.ndarray) -> float:
    """|A∩M| / |A∪M|; 1 when both masks are empty."""
    a, m = _binary_pair(a, m)
    union = int((a | m).sum())
    if union == 0:
        return 1.0
    return int((a & m).sum()) / union


@dataclass(frozen=True)
class ConfusionCounts:
    t1: int  # object pixels predicted as object
    t0: int  # background predicted as background
    f1: int  # background predicted as object
    f0: int  # object predicted as background

    @property
    def n1(self) -> int:
        return self.t1 + self.f0

    @property
    def n0(self) -> int:
        return self.t0 + self.f1


@dataclass(frozen=True)
class Confusion:
    """Counts plus the four rates; a rate with a zero denominator is None (undefined)."""
    counts: ConfusionCounts
    p: Optional[float]
    q: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def confusion(pred: np.ndarray, truth: np.ndarray) -> Confusion:
    """
    Pixel confusion counts and rates.

    p = T1/N1 (sensitivity), q = T0/N0 (specificity),
    PPV = T1/(T1+F1), NPV = T0/(T0+F0)
    """
    a, m = _binary_pair(pred, truth)
    counts = ConfusionCounts(
        t1=int((a & m).sum()),
        t0=int((~a & ~m).sum()),
        f1=int((a & ~m).sum()),
        f0=int((~a & m).sum()),
    )
    return Confusion(
        counts=counts,
        p=_ratio(counts.t1, counts.n1),
        q=_ratio(counts.t0, counts.n0),
        ppv=_ratio(counts.t1, counts.t1 + counts.f1),
        npv=_ratio(counts.t0, counts.t0 + counts.f0),
    )


def mean_foreground_dice(pred_labels: np.ndarray, truth_labels: np.ndarray, num_classes: int = 2) -> float:
    """Dice averaged over classes 1..K-1 (just the object class for binary labels)."""
    return float(np.mean([dice(pred_labels == k, truth_labels == k) for k in range(1, num_classes)]))
