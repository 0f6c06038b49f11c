"""
Contours Module
---------------
Expert contours as closed polygons, their text file format and rasterization.

Coordinates are sub-pixel image coordinates: x runs along columns, y along rows,
and pixel (r, c) has its center at (x=c, y=r).
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

logger = logging.getLogger("cardiac_fcn.data")

# Pixel centers are nudged by this much before the inside test, so a center lying
# exactly on an edge or vertex always resolves the same way.
RASTER_DELTA = 2.0 ** -20

STRUCTURES = ("endo", "epi", "myo", "multi")


class ContourError(ValueError):
    """Raised for degenerate or unreadable contours."""


@dataclass(frozen=True)
class Contour:
    points: np.ndarray  # (n, 2) float64, columns x, y; implicitly closed

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ContourError(f"contour points must be (n, 2), got shape {points.shape}")
        if len(points) < 3:
            raise ContourError(f"a contour needs at least 3 points, got {len(points)}")
        if not np.all(np.isfinite(points)):
            raise ContourError("contour has non-finite coordinates")
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.points)

    def translate(self, dx: float, dy: float) -> "Contour":
        return Contour(self.points + np.array([dx, dy]))

    def area(self) -> float:
        """Shoelace area (absolute)."""
        x, y = self.points[:, 0], self.points[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def read_contour(path: str) -> Contour:
    """One `x y` pair per line; blank lines ignored."""
    points = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 2:
                raise ContourError(f"{path}:{lineno}: expected 'x y', got '{line.strip()}'")
            try:
                points.append((float(fields[0]), float(fields[1])))
            except ValueError as e:
                raise ContourError(f"{path}:{lineno}: non-numeric coordinate") from e
    try:
        return Contour(np.array(points, dtype=np.float64).reshape(-1, 2))
    except ContourError as e:
        raise ContourError(f"{path}: {e}") from e


def write_contour(contour: Contour, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for x, y in contour.points:
            f.write(f"{x:.17g} {y:.17g}\n")


def rasterize_contour(contour: Contour, h: int, w: int) -> np.ndarray:
    """
    Even-odd fill of a closed contour on an h x w grid.

    ================================================

    Pixel (r, c) is inside iff (c + delta, r + delta) is inside the polygon under
    the even-odd rule. Scanline per row: the x-crossings of every edge that
    straddles the row are sorted, and a center is inside when an odd number of
    crossings lie to its right.

    outputs:
    mask: uint8 (h, w), 1 inside

    ================================================
    """
    if h < 1 or w < 1:
        raise ContourError(f"cannot rasterize onto a {h}x{w} grid")
    pts = contour.points
    x1, y1 = pts[:, 0], pts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)

    mask = np.zeros((h, w), dtype=np.uint8)
    centers = np.arange(w, dtype=np.float64) + RASTER_DELTA
    for r in range(h):
        py = r + RASTER_DELTA
        straddle = (y1 > py) != (y2 > py)
        if not straddle.any():
            continue
        ax, ay, bx, by = x1[straddle], y1[straddle], x2[straddle], y2[straddle]
        crossings = np.sort(ax + (py - ay) * (bx - ax) / (by - ay))
        to_right = len(crossings) - np.searchsorted(crossings, centers, side="right")
        mask[r] = (to_right % 2).astype(np.uint8)
    return mask


def structure_mask(endo: Optional[Contour], epi: Optional[Contour], structure: str, h: int, w: int) -> np.ndarray:
    """
    Label mask for the chosen target structure.

    endo / epi: binary mask of that contour's interior
    myo:        epicardium minus endocardium (binary)
    multi:      0 background, 1 myocardium ring, 2 blood pool
    """
    if structure not in STRUCTURES:
        raise ContourError(f"unknown structure '{structure}', expected one of {', '.join(STRUCTURES)}")

    needed = {"endo": (endo,), "epi": (epi,), "myo": (endo, epi), "multi": (endo, epi)}[structure]
    if any(c is None for c in needed):
        raise ContourError(f"structure '{structure}' needs {'both contours' if len(needed) == 2 else 'its contour'}")

    if structure == "endo":
        return rasterize_contour(endo, h, w)
    if structure == "epi":
        return rasterize_contour(epi, h, w)

    blood = rasterize_contour(endo, h, w)
    wall = rasterize_contour(epi, h, w)
    ring = (wall == 1) & (blood == 0)
    if structure == "myo":
        return ring.astype(np.uint8)
    labels = np.zeros((h, w), dtype=np.uint8)
    labels[ring] = 1
    labels[blood == 1] = 2
    return labels


def num_classes_for(structure: str) -> int:
    return 3 if structure == "multi" else 2
