"""
Evaluation Module
-----------------
Per-image metric rows, per-structure summaries and the report CSV.

A prediction with no foreground has Dice = Jaccard = 0 against a non-empty
truth, no contour distances (excluded from the distance means) and counts as
not good in the good-contour percentage.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from backend.data_pipeline.contours import Contour
from metrics.contour_extraction import mask_to_contour
from metrics.distances import GOOD_CONTOUR_MM, apd, densify, hausdorff
from metrics.overlap import MetricError, confusion, dice, jaccard

logger = logging.getLogger("cardiac_fcn.metrics")

METRIC_FIELDS = ("dice", "jaccard", "apd_mm", "hausdorff_mm", "p", "q", "ppv", "npv")
CSV_COLUMNS = ("id", "structure") + METRIC_FIELDS + ("good_contour",)


@dataclass(frozen=True)
class ImageMetrics:
    image_id: str
    structure: str
    dice: float
    jaccard: float
    apd_mm: Optional[float]
    hausdorff_mm: Optional[float]
    good_contour: bool
    p: Optional[float]
    q: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]

    @property
    def predicted_empty(self) -> bool:
        return self.apd_mm is None


@dataclass(frozen=True)
class StructureSummary:
    structure: str
    count: int
    mean: Dict[str, Optional[float]]
    sd: Dict[str, Optional[float]]
    good_contour_pct: float


def good_contour_pct(apds: Sequence[Optional[float]]) -> float:
    """Percentage of APDs strictly below 5 mm; missing predictions count as not good."""
    if len(apds) == 0:
        raise MetricError("good-contour percentage of an empty list is undefined")
    good = sum(1 for value in apds if value is not None and value < GOOD_CONTOUR_MM)
    return 100.0 * good / len(apds)


def evaluate_image(pred_mask: np.ndarray, truth_mask: np.ndarray, truth_contour: Optional[Contour] = None,
                   spacing: Tuple[float, float] = (1.0, 1.0), image_id: str = "", structure: str = "",
                   symmetric_apd: bool = True) -> ImageMetrics:
    """
    Every metric for one predicted mask.

    The predicted contour is extracted from `pred_mask`; the truth contour is the
    expert contour when given, else extracted from `truth_mask`.
    """
    pred = np.asarray(pred_mask) > 0
    truth = np.asarray(truth_mask) > 0
    rates = confusion(pred, truth)

    pred_contour = mask_to_contour(pred)
    reference = truth_contour if truth_contour is not None else mask_to_contour(truth)
    if pred_contour is None or reference is None:
        if pred_contour is None:
            logger.warning(f"{image_id or 'image'}: empty {structure or 'object'} prediction, no contour")
        distance, worst = None, None
    else:
        pred_points, truth_points = densify(pred_contour), densify(reference)
        distance = apd(pred_points, truth_points, spacing, symmetric=symmetric_apd)
        worst = hausdorff(pred_points, truth_points, spacing)

    return ImageMetrics(
        image_id=image_id,
        structure=structure,
        dice=dice(pred, truth),
        jaccard=jaccard(pred, truth),
        apd_mm=distance,
        hausdorff_mm=worst,
        good_contour=distance is not None and distance < GOOD_CONTOUR_MM,
        p=rates.p,
        q=rates.q,
        ppv=rates.ppv,
        npv=rates.npv,
    )


def evaluate_many(jobs: Iterable[dict], workers: Optional[int] = None) -> List[ImageMetrics]:
    """evaluate_image over keyword-argument dicts, in input order."""
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda kwargs: evaluate_image(**kwargs), jobs))


def _mean_sd(values: List[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return mean, sd


def summarize(rows: Sequence[ImageMetrics]) -> List[StructureSummary]:
    """Mean and sample standard deviation (n - 1) of every metric per structure, undefined values excluded."""
    by_structure: Dict[str, List[ImageMetrics]] = {}
    for row in rows:
        by_structure.setdefault(row.structure, []).append(row)

    summaries = []
    for structure, group in by_structure.items():
        means, sds = {}, {}
        for name in METRIC_FIELDS:
            values = [getattr(r, name) for r in group if getattr(r, name) is not None]
            means[name], sds[name] = _mean_sd(values)
        summaries.append(StructureSummary(
            structure=structure,
            count=len(group),
            mean=means,
            sd=sds,
            good_contour_pct=good_contour_pct([r.apd_mm for r in group]),
        ))
    return summaries


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    return f"{value:.6f}"


def write_metrics_csv(rows: Sequence[ImageMetrics], path: str) -> List[StructureSummary]:
    """
    One row per (image, structure), then one `summary` row per structure whose metric
    cells read "mean (sd)" and whose good_contour cell is the good-contour percentage.
    """
    summaries = summarize(rows)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([row.image_id, row.structure] + [_cell(getattr(row, name)) for name in METRIC_FIELDS]
                            + [_cell(row.good_contour)])
        for summary in summaries:
            cells = []
            for name in METRIC_FIELDS:
                mean, sd = summary.mean[name], summary.sd[name]
                cells.append("" if mean is None else f"{mean:.6f} ({_cell(sd) or '-'})")
            writer.writerow(["summary", summary.structure] + cells + [f"{summary.good_contour_pct:.2f}"])
    logger.info(f"Wrote metrics for {len(rows)} images to {path}")
    return summaries


def metric_names() -> List[str]:
    return [f.name for f in fields(ImageMetrics)]
