"""
Phantom Generator
-----------------
Deterministic synthetic short-axis slices with analytically known contours.

family A: LV-like concentric ellipses (blood pool inside the endocardial ellipse,
          myocardium ring out to the epicardial ellipse)
family B: RV-like crescent cavity (an ellipse minus a shifted disc) inside an
          epicardial ellipse

Each sample draws from its own generator seeded with (seed, index), so samples
can be built in parallel and a dataset never depends on worker count.
"""

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, root_validator, validator
from scipy.optimize import brentq

from backend.data_pipeline.augmentation import Sample, mvn_normalize
from backend.data_pipeline.contours import Contour, rasterize_contour, structure_mask, write_contour
from backend.data_pipeline.image_io import write_pgm

logger = logging.getLogger("cardiac_fcn.phantom")

CONTOUR_POINTS = 64
FAMILIES = ("A", "B")
MANIFEST_NAME = "manifest.csv"

# Crescent cut: disc centered this far along the major axis (in major radii) ...
DISC_OFFSET = 0.9
# ... with this radius (in major radii)
DISC_RADIUS = 0.8


class PhantomSpecError(ValueError):
    """Raised for phantom parameters that would put a structure outside the image."""


class PhantomSpec(BaseModel):
    size: int = 64
    count: int = 32
    seed: int = 0
    family: str = "A"
    center_jitter: float = 3.0
    endo_radius: Tuple[float, float] = (7.0, 12.0)
    ring_thickness: Tuple[float, float] = (3.0, 5.0)
    blood_level: float = 3000.0
    myocardium_level: float = 1200.0
    background_level: float = 300.0
    noise_sd: float = 150.0
    pixel_spacing: float = 1.25

    @validator("family", pre=True)
    def _known_family(cls, family):
        family = str(family).upper()
        if family not in FAMILIES:
            raise ValueError(f"unknown phantom family '{family}', expected one of {', '.join(FAMILIES)}")
        return family

    @validator("size", "count")
    def _positive(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be >= 1, got {value}")
        return value

    @validator("endo_radius", "ring_thickness")
    def _ordered_range(cls, bounds, field):
        low, high = bounds
        if not 0 < low <= high:
            raise ValueError(f"{field.name} must satisfy 0 < low <= high, got {bounds}")
        return bounds

    @validator("center_jitter", "noise_sd")
    def _non_negative(cls, value, field):
        if value < 0:
            raise ValueError(f"{field.name} must be >= 0, got {value}")
        return value

    @validator("pixel_spacing")
    def _positive_spacing(cls, value):
        if value <= 0:
            raise ValueError(f"pixel_spacing must be > 0, got {value}")
        return value

    @root_validator(skip_on_failure=True)
    def _contained(cls, values):
        check_containment(values["size"], values["endo_radius"], values["ring_thickness"], values["center_jitter"])
        return values


def check_containment(size: int, endo_radius: Tuple[float, float], ring_thickness: Tuple[float, float],
                      center_jitter: float) -> None:
    reach = endo_radius[1] + ring_thickness[1] + center_jitter
    limit = size / 2 - 1
    if reach >= limit:
        raise PhantomSpecError(f"largest epicardium reaches {reach:g} px from the center, "
                               f"a {size}x{size} image allows less than {limit:g}")


@dataclass(frozen=True)
class PhantomCase:
    case_id: str
    pixels: np.ndarray  # uint16 (size, size)
    endo: Contour
    epi: Contour
    spacing: Tuple[float, float]

    def mask(self, structure: str = "endo") -> np.ndarray:
        h, w = self.pixels.shape
        return structure_mask(self.endo, self.epi, structure, h, w)

    def sample(self, structure: str = "endo") -> Sample:
        return Sample(sample_id=self.case_id, image=mvn_normalize(self.pixels), mask=self.mask(structure),
                      spacing=self.spacing)


def _rotate(points: np.ndarray, cx: float, cy: float, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rel = points - np.array([cx, cy])
    return np.stack([cx + c * rel[:, 0] - s * rel[:, 1], cy + s * rel[:, 0] + c * rel[:, 1]], axis=1)


def ellipse_contour(cx: float, cy: float, a: float, b: float, angle: float = 0.0,
                    points: int = CONTOUR_POINTS) -> Contour:
    """Polyline of `points` vertices on the ellipse with semi-axes a (x) and b (y), rotated by `angle`."""
    theta = np.linspace(0, 2 * np.pi, points, endpoint=False)
    polyline = np.stack([cx + a * np.cos(theta), cy + b * np.sin(theta)], axis=1)
    return Contour(_rotate(polyline, cx, cy, angle))


def crescent_contour(cx: float, cy: float, a: float, b: float, angle: float = 0.0,
                     points: int = CONTOUR_POINTS) -> Contour:
    """
    Boundary of the ellipse (semi-axes a >= b) minus a disc cut into its +x end.

    The disc sits at (cx + 0.9a, cy) with radius 0.8a. The ellipse/circle crossing
    angle is found with brentq: on [0, pi] the squared distance from the ellipse to
    the disc center grows monotonically while b^2 > 0.1 a^2.
    """
    if b > a:
        raise ValueError("crescent_contour expects a >= b")
    s, r = DISC_OFFSET * a, DISC_RADIUS * a

    def outside(theta):
        return (a * math.cos(theta) - s) ** 2 + (b * math.sin(theta)) ** 2 - r ** 2

    crossing = brentq(outside, 0.0, math.pi)
    on_ellipse = points * 5 // 8
    on_disc = points - on_ellipse

    theta = np.linspace(crossing, 2 * np.pi - crossing, on_ellipse)
    ellipse_arc = np.stack([a * np.cos(theta), b * np.sin(theta)], axis=1)

    # disc arc facing the ellipse center, walked from the lower crossing back to the upper one
    phi_top = math.atan2(b * math.sin(crossing), a * math.cos(crossing) - s)
    phi = np.linspace(2 * np.pi - phi_top, phi_top, on_disc + 2)[1:-1]
    disc_arc = np.stack([s + r * np.cos(phi), r * np.sin(phi)], axis=1)

    polyline = np.concatenate([ellipse_arc, disc_arc]) + np.array([cx, cy])
    return Contour(_rotate(polyline, cx, cy, angle))


def _render(spec: PhantomSpec, endo_mask: np.ndarray, epi_mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    image = np.full(endo_mask.shape, spec.background_level, dtype=np.float64)
    image[epi_mask == 1] = spec.myocardium_level
    image[endo_mask == 1] = spec.blood_level
    image += rng.normal(0.0, spec.noise_sd, size=image.shape) if spec.noise_sd else 0.0
    return np.clip(np.rint(image), 0, np.iinfo(np.uint16).max).astype(np.uint16)


def generate_case(spec: PhantomSpec, index: int) -> PhantomCase:
    rng = np.random.default_rng([spec.seed, index])
    center = spec.size / 2 - 0.5
    cx, cy = center + rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
    a, b = sorted(rng.uniform(*spec.endo_radius, size=2), reverse=True)
    thickness = rng.uniform(*spec.ring_thickness)
    angle = rng.uniform(0.0, np.pi)

    if spec.family == "A":
        endo = ellipse_contour(cx, cy, a, b, angle)
    else:
        endo = crescent_contour(cx, cy, a, b, angle)
    epi = ellipse_contour(cx, cy, a + thickness, b + thickness, angle)

    endo_mask = rasterize_contour(endo, spec.size, spec.size)
    epi_mask = rasterize_contour(epi, spec.size, spec.size)
    pixels = _render(spec, endo_mask, epi_mask, rng)
    return PhantomCase(
        case_id=f"phantom_{spec.family.lower()}_{index:04d}",
        pixels=pixels,
        endo=endo,
        epi=epi,
        spacing=(spec.pixel_spacing, spec.pixel_spacing),
    )


def generate(spec: PhantomSpec, workers: Optional[int] = None) -> List[PhantomCase]:
    """`spec.count` phantoms, identical for identical specs."""
    check_containment(spec.size, spec.endo_radius, spec.ring_thickness, spec.center_jitter)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        cases = list(executor.map(lambda i: generate_case(spec, i), range(spec.count)))
    logger.info(f"Generated {len(cases)} family {spec.family} phantoms at {spec.size}x{spec.size}")
    return cases


def write_phantom_dataset(cases: List[PhantomCase], out_dir: str) -> str:
    """
    Write PGM images, contour files and a manifest.csv readable by the data pipeline.

    Returns the manifest path.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "image", "contour_endo", "contour_epi", "pixel_spacing"])
        for case in cases:
            image, endo, epi = f"{case.case_id}.pgm", f"{case.case_id}_endo.txt", f"{case.case_id}_epi.txt"
            write_pgm(case.pixels, os.path.join(out_dir, image))
            write_contour(case.endo, os.path.join(out_dir, endo))
            write_contour(case.epi, os.path.join(out_dir, epi))
            writer.writerow([case.case_id, image, endo, epi, f"{case.spacing[0]:g}\\{case.spacing[1]:g}"])
    logger.info(f"Wrote {len(cases)} phantoms to {out_dir}")
    return manifest
