"""
Contour distance metrics in millimeters.

Distances are point-to-point between contour vertices. Coordinates are scaled
per axis before the Euclidean distance: x (columns) by col_mm, y (rows) by row_mm.
"""

from typing import Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from backend.data_pipeline.contours import Contour
from metrics.overlap import MetricError

GOOD_CONTOUR_MM = 5.0

PointsLike = Union[Contour, np.ndarray]


def _points_mm(points: PointsLike, spacing: Tuple[float, float]) -> np.ndarray:
    array = points.points if isinstance(points, Contour) else np.asarray(points, dtype=np.float64)
    array = array.reshape(-1, 2)
    if len(array) == 0:
        raise MetricError("contour has no points")
    row_mm, col_mm = spacing
    return array * np.array([col_mm, row_mm])


def _distances(a: PointsLike, m: PointsLike, spacing: Tuple[float, float]) -> np.ndarray:
    return cdist(_points_mm(a, spacing), _points_mm(m, spacing))


def hausdorff(a: PointsLike, m: PointsLike, spacing: Tuple[float, float] = (1.0, 1.0)) -> float:
    """max(max_a min_m d, max_m min_a d)."""
    d = _distances(a, m, spacing)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def apd(a: PointsLike, m: PointsLike, spacing: Tuple[float, float] = (1.0, 1.0), symmetric: bool = True) -> float:
    """
    Average perpendicular distance.

    symmetric: mean of the a->m and m->a average nearest-point distances
    otherwise: the a->m direction only
    """
    d = _distances(a, m, spacing)
    forward = float(d.min(axis=1).mean())
    if not symmetric:
        return forward
    return 0.5 * (forward + float(d.min(axis=0).mean()))


def densify(contour: PointsLike, max_step: float = 0.25) -> np.ndarray:
    """
    Closed polyline with extra vertices so consecutive points are at most `max_step`
    pixels apart. Original vertices are kept.
    """
    points = contour.points if isinstance(contour, Contour) else np.asarray(contour, dtype=np.float64).reshape(-1, 2)
    nxt = np.roll(points, -1, axis=0)
    pieces = []
    for start, end in zip(points, nxt):
        steps = max(1, int(np.ceil(np.hypot(*(end - start)) / max_step)))
        t = np.arange(steps)[:, None] / steps
        pieces.append(start + t * (end - start))
    return np.concatenate(pieces)
