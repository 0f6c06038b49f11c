"""
Mask to contour conversion.

Marching squares at iso-level 0.5 over the zero-padded mask of the largest
8-connected foreground component. Vertices sit on cell-edge midpoints, so for a
binary mask every vertex has a half-integer x or y and re-rasterizing the
contour reproduces the component (holes filled).
"""

import logging
from collections import defaultdict
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from backend.data_pipeline.contours import Contour

logger = logging.getLogger("cardiac_fcn.metrics")

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)

# Edge midpoints of cell (i, j) in doubled padded coordinates (2*row, 2*col).
_EDGES = {
    "T": lambda i, j: (2 * i, 2 * j + 1),
    "R": lambda i, j: (2 * i + 1, 2 * j + 2),
    "B": lambda i, j: (2 * i + 2, 2 * j + 1),
    "L": lambda i, j: (2 * i + 1, 2 * j),
}

# case = 8*tl + 4*tr + 2*br + 1*bl. Saddles (5, 10) keep the two inside corners
# joined, matching 8-connectivity.
_SEGMENTS = {
    1: [("L", "B")],
    2: [("B", "R")],
    3: [("L", "R")],
    4: [("T", "R")],
    5: [("L", "T"), ("B", "R")],
    6: [("T", "B")],
    7: [("L", "T")],
    8: [("L", "T")],
    9: [("T", "B")],
    10: [("T", "R"), ("L", "B")],
    11: [("T", "R")],
    12: [("L", "R")],
    13: [("B", "R")],
    14: [("L", "B")],
}

Key = Tuple[int, int]


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Boolean mask of the largest 8-connected foreground component (ties: lowest label)."""
    labels, count = ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
    if count == 0:
        return np.zeros(labels.shape, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(sizes.argmax()) + 1)


def _segments(component: np.ndarray) -> Dict[Key, List[Key]]:
    padded = np.pad(component.astype(np.uint8), 1)
    cases = 8 * padded[:-1, :-1] + 4 * padded[:-1, 1:] + 2 * padded[1:, 1:] + padded[1:, :-1]
    graph: Dict[Key, List[Key]] = defaultdict(list)
    for i, j in zip(*np.nonzero((cases > 0) & (cases < 15))):
        for start, end in _SEGMENTS[int(cases[i, j])]:
            a, b = _EDGES[start](i, j), _EDGES[end](i, j)
            graph[a].append(b)
            graph[b].append(a)
    return graph


def _loops(graph: Dict[Key, List[Key]]) -> List[List[Key]]:
    loops = []
    unvisited = set(graph)
    while unvisited:
        start = min(unvisited)
        loop = [start]
        unvisited.discard(start)
        previous, current = None, start
        while True:
            options = [k for k in graph[current] if k != previous]
            step = options[0] if options else graph[current][0]
            if step == start:
                break
            if step not in unvisited:
                break
            loop.append(step)
            unvisited.discard(step)
            previous, current = current, step
        loops.append(loop)
    return loops


def _shoelace(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def mask_to_contour(mask: np.ndarray) -> Optional[Contour]:
    """
    Boundary of the largest foreground component as a closed contour, or None for an empty mask.

    ================================================

    inputs:
    mask: (h, w) array, nonzero = foreground

    outputs:
    Contour with points (x, y) in image coordinates, or None

    ================================================
    """
    component = largest_component(mask)
    if not component.any():
        return None

    best, best_area = None, -1.0
    for loop in _loops(_segments(component)):
        doubled = np.array(loop, dtype=np.float64)
        # doubled (row, col) in padded coordinates -> image (x, y)
        points = np.stack([doubled[:, 1] / 2 - 1, doubled[:, 0] / 2 - 1], axis=1)
        area = _shoelace(points)
        if area > best_area:
            best, best_area = points, area
    return Contour(best)
