import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, validator

from backend.data_pipeline.augmentation import (
    AugmentationConfig,
    Sample,
    augment,
    center_crop,
    crop_dim_for,
    get_preset,
    mvn_normalize,
)
from backend.data_pipeline.contours import STRUCTURES, Contour, ContourError, read_contour, structure_mask
from backend.data_pipeline.image_io import read_image

logger = logging.getLogger("cardiac_fcn.data")

MANIFEST_COLUMNS = ("id", "image", "contour_endo", "contour_epi")
DEFAULT_SPACING = (1.0, 1.0)


class ManifestError(ValueError):
    """Raised for malformed manifests and missing or inconsistent referenced files."""


class ManifestRow(BaseModel):
    id: str
    image: str
    contour_endo: Optional[str] = None
    contour_epi: Optional[str] = None
    pixel_spacing: Optional[Tuple[float, float]] = None

    @validator("contour_endo", "contour_epi", pre=True)
    def _blank_is_missing(cls, value):
        return value or None

    @validator("pixel_spacing", pre=True)
    def _parse_spacing(cls, value):
        if value is None or value == "":
            return None
        if isinstance(value, str):
            parts = [float(p) for p in value.replace("\\", " ").split()]
            value = (parts[0], parts[0]) if len(parts) == 1 else tuple(parts)
        if len(value) != 2 or min(value) <= 0:
            raise ValueError(f"pixel_spacing must be one or two positive numbers, got {value!r}")
        return value


class DatasetConfig(BaseModel):
    structure: str = "endo"
    preset: str = "none"
    augmentation: Optional[AugmentationConfig] = None
    train: bool = False
    workers: Optional[int] = None

    @validator("structure")
    def _known_structure(cls, structure):
        if structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {', '.join(STRUCTURES)}, got '{structure}'")
        return structure

    @validator("workers")
    def _positive_workers(cls, workers):
        if workers is not None and workers < 1:
            raise ValueError("workers must be >= 1")
        return workers

    def augmentation_config(self) -> AugmentationConfig:
        return self.augmentation or get_preset(self.preset)


@dataclass(frozen=True)
class Case:
    """A manifest row with its files loaded, before any cropping."""
    case_id: str
    pixels: np.ndarray
    spacing: Tuple[float, float]
    endo: Optional[Contour]
    epi: Optional[Contour]


class DataHandler:
    def __init__(self, manifest_path: str, cfg: Optional[DatasetConfig] = None):
        """
        Loads the samples a manifest describes.

        ================================================

        Manifest: CSV with header `id,image,contour_endo,contour_epi` and an optional
        `pixel_spacing` column ("row\\col" or one value for both). Paths are relative
        to the manifest's directory. Empty contour cells mean no ground truth for
        that structure.

        ================================================

        Example Usage:
        --------------
        handler = DataHandler("data/manifest.csv", DatasetConfig(structure="endo", preset="sunnybrook", train=True))
        samples = handler.load_dataset()

        ================================================
        """
        self.manifest_path = manifest_path
        self.base_dir = os.path.dirname(os.path.abspath(manifest_path))
        self.cfg = cfg or DatasetConfig()

    def _resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def read_manifest(self) -> List[ManifestRow]:
        if not os.path.exists(self.manifest_path):
            raise ManifestError(f"manifest not found: {self.manifest_path}")
        with open(self.manifest_path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            missing = [c for c in MANIFEST_COLUMNS if c not in header]
            if missing:
                raise ManifestError(f"{self.manifest_path}: missing column(s) {', '.join(missing)}")
            rows = []
            seen = set()
            for lineno, record in enumerate(reader, start=2):
                try:
                    row = ManifestRow(**{k: (v or "").strip() for k, v in record.items() if k})
                except ValueError as e:
                    raise ManifestError(f"{self.manifest_path}:{lineno}: {e}") from e
                if row.id in seen:
                    raise ManifestError(f"{self.manifest_path}:{lineno}: duplicate sample id '{row.id}'")
                seen.add(row.id)
                rows.append(row)
        if not rows:
            logger.warning(f"Manifest {self.manifest_path} lists no samples")
        return rows

    def load_case(self, row: ManifestRow) -> Case:
        image_path = self._resolve(row.image)
        if not os.path.exists(image_path):
            raise ManifestError(f"{row.id}: image file not found: {image_path}")
        pixels, dicom_spacing = read_image(image_path)
        h, w = pixels.shape
        spacing = dicom_spacing or row.pixel_spacing or DEFAULT_SPACING

        contours = []
        for column in ("contour_endo", "contour_epi"):
            path = getattr(row, column)
            if path is None:
                contours.append(None)
                continue
            path = self._resolve(path)
            if not os.path.exists(path):
                raise ManifestError(f"{row.id}: contour file not found: {path}")
            try:
                contour = read_contour(path)
            except ContourError as e:
                raise ManifestError(f"{row.id}: {e}") from e
            xs, ys = contour.points[:, 0], contour.points[:, 1]
            if xs.min() < -0.5 or ys.min() < -0.5 or xs.max() > w - 0.5 or ys.max() > h - 0.5:
                raise ManifestError(f"{row.id}: {column} extends beyond the {h}x{w} image")
            contours.append(contour)

        return Case(case_id=row.id, pixels=pixels, spacing=tuple(spacing), endo=contours[0], epi=contours[1])

    def load_cases(self) -> List[Case]:
        rows = self.read_manifest()
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as executor:
            return list(executor.map(self.load_case, rows))

    def has_truth(self, case: Case) -> bool:
        structure = self.cfg.structure
        if structure == "endo":
            return case.endo is not None
        if structure == "epi":
            return case.epi is not None
        return case.endo is not None and case.epi is not None

    def prepare(self, case: Case, index: int) -> List[Sample]:
        """Crop, normalize and (for training) augment one case."""
        aug = self.cfg.augmentation_config()
        h, w = case.pixels.shape
        if self.has_truth(case):
            mask = structure_mask(case.endo, case.epi, self.cfg.structure, h, w)
        else:
            mask = np.zeros((h, w), dtype=np.uint8)

        dim = crop_dim_for(aug, h, w, index, self.cfg.train)
        offset = (0, 0)
        image = case.pixels
        tag = ""
        if dim is not None:
            image, mask, offset = center_crop(image, mask, dim)
            tag = f"crop{dim}"

        sample = Sample(sample_id=case.case_id, image=mvn_normalize(image), mask=np.ascontiguousarray(mask),
                        spacing=case.spacing, tag=tag, offset=offset)
        if self.cfg.train:
            return augment(sample, aug)
        return [sample]

    def load_dataset(self) -> List[Sample]:
        cases = self.load_cases()
        if self.cfg.train:
            usable = []
            for case in cases:
                if self.has_truth(case):
                    usable.append(case)
                else:
                    logger.warning(f"Skipping {case.case_id}: no {self.cfg.structure} contour for training")
            cases = usable

        with ThreadPoolExecutor(max_workers=self.cfg.workers) as executor:
            prepared = list(executor.map(self.prepare, cases, range(len(cases))))
        samples = [s for group in prepared for s in group]
        logger.info(f"Loaded {len(samples)} samples from {len(cases)} cases in {self.manifest_path}")
        return samples


def load_dataset(manifest_path: str, cfg: Optional[DatasetConfig] = None) -> List[Sample]:
    return DataHandler(manifest_path, cfg).load_dataset()
