"""
Augmentation Module
-------------------
Cropping, input normalization and the rotation/flip augmentation used to
inflate the training set.

Presets follow the per-dataset augmentation table:

    preset      train crop dims          test crop   rotations      flips
    sunnybrook  100, 110, 120            100         90/180/270     v + h
    lvsc        int(min(h, w) * 0.6)     same        -              -
    rvsc        200, 208, 216            200         90/180/270     v + h
    none        no crop                  no crop     90/180/270     v + h

A training image gets one crop dim (round-robin over the list by source index)
and then every rotation x flip variant: 4 x 3 = 12 for the full configuration.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, validator

logger = logging.getLogger("cardiac_fcn.data")

MVN_EPS = 1e-6
LVSC_CROP_FRACTION = 0.6


class AugmentationError(ValueError):
    """Raised when a transform cannot be applied to a sample."""


@dataclass(frozen=True)
class Sample:
    """
    One network input with its ground truth.

    image: float32 (h, w), already normalized
    mask:  uint8 (h, w), 0 background and 1..K-1 object classes
    spacing: (row_mm, col_mm)
    tag: augmentation applied, e.g. "crop110/rot90/vflip"
    """
    sample_id: str
    image: np.ndarray
    mask: np.ndarray
    spacing: Tuple[float, float] = (1.0, 1.0)
    tag: str = ""
    offset: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise AugmentationError(f"{self.sample_id}: image {self.image.shape} and mask {self.mask.shape} differ")


class AugmentationConfig(BaseModel):
    train_crop_dims: List[int] = []
    crop_fraction: Optional[float] = None
    test_crop_dim: Optional[int] = None
    rotations: List[int] = [90, 180, 270]
    vertical_flip: bool = True
    horizontal_flip: bool = True

    class Config:
        allow_mutation = False

    @validator("rotations", each_item=True)
    def _quarter_turns(cls, angle):
        if angle not in (90, 180, 270):
            raise ValueError(f"rotations must be 90, 180 or 270 degrees, got {angle}")
        return angle

    @validator("crop_fraction")
    def _fraction_range(cls, fraction):
        if fraction is not None and not 0 < fraction <= 1:
            raise ValueError(f"crop_fraction must be in (0, 1], got {fraction}")
        return fraction

    @property
    def variant_count(self) -> int:
        return (1 + len(set(self.rotations))) * (1 + int(self.vertical_flip) + int(self.horizontal_flip))


PRESETS: Dict[str, AugmentationConfig] = {
    "sunnybrook": AugmentationConfig(train_crop_dims=[100, 110, 120], test_crop_dim=100),
    "lvsc": AugmentationConfig(crop_fraction=LVSC_CROP_FRACTION, rotations=[],
                               vertical_flip=False, horizontal_flip=False),
    "rvsc": AugmentationConfig(train_crop_dims=[200, 208, 216], test_crop_dim=200),
    "none": AugmentationConfig(),
}


def get_preset(name: str) -> AugmentationConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise AugmentationError(f"unknown preset '{name}', expected one of {', '.join(PRESETS)}") from None


def lvsc_crop_dim(h: int, w: int) -> int:
    return int(min(h, w) * LVSC_CROP_FRACTION)


def crop_offset(h: int, w: int, dim: int) -> Tuple[int, int]:
    return (h - dim) // 2, (w - dim) // 2


def center_crop(image: np.ndarray, mask: Optional[np.ndarray], dim: int):
    """
    Square center crop of side `dim`, applied identically to image and mask.

    Returns (image, mask, (top, left)); contours follow with
    contour.translate(-left, -top).
    """
    h, w = image.shape[:2]
    if dim < 1 or dim > min(h, w):
        raise AugmentationError(f"crop dim {dim} does not fit a {h}x{w} image")
    top, left = crop_offset(h, w, dim)
    cropped = image[top:top + dim, left:left + dim]
    cropped_mask = mask[top:top + dim, left:left + dim] if mask is not None else None
    return cropped, cropped_mask, (top, left)


def mvn_normalize(image: np.ndarray, eps: float = MVN_EPS) -> np.ndarray:
    """Whole-image standardization: (x - mean) / (population std + eps); constant images become 0."""
    x = np.asarray(image, dtype=np.float64)
    if x.size < 2:
        raise AugmentationError("mvn_normalize needs at least 2 pixels")
    centered = x - x.mean()
    std = np.sqrt((centered ** 2).mean())
    if std == 0:
        return np.zeros(x.shape, dtype=np.float32)
    return (centered / (std + eps)).astype(np.float32)


def crop_dim_for(cfg: AugmentationConfig, h: int, w: int, index: int, train: bool) -> Optional[int]:
    """Crop side for a source image, or None for no crop."""
    if cfg.crop_fraction is not None:
        return int(min(h, w) * cfg.crop_fraction)
    if train and cfg.train_crop_dims:
        return cfg.train_crop_dims[index % len(cfg.train_crop_dims)]
    if not train and cfg.test_crop_dim is not None:
        return cfg.test_crop_dim
    return None


def _transform(array: np.ndarray, quarter_turns: int, flip: Optional[str]) -> np.ndarray:
    out = np.rot90(array, quarter_turns)
    if flip == "vflip":
        out = np.flipud(out)
    elif flip == "hflip":
        out = np.fliplr(out)
    return np.ascontiguousarray(out)


def augment(sample: Sample, cfg: AugmentationConfig) -> List[Sample]:
    """
    Every rotation x flip variant of a sample, identity first.

    The same transform is applied to image and mask. Rotations need a square sample.
    """
    h, w = sample.image.shape
    turns = [0] + sorted({angle // 90 for angle in cfg.rotations})
    if len(turns) > 1 and h != w:
        raise AugmentationError(f"{sample.sample_id}: rotations need a square image, got {h}x{w}")
    flips: List[Optional[str]] = [None]
    if cfg.vertical_flip:
        flips.append("vflip")
    if cfg.horizontal_flip:
        flips.append("hflip")

    variants = []
    for k in turns:
        for flip in flips:
            parts = [p for p in (sample.tag, f"rot{90 * k}" if k else "", flip or "") if p]
            variants.append(replace(
                sample,
                image=_transform(sample.image, k, flip),
                mask=_transform(sample.mask, k, flip),
                spacing=sample.spacing[::-1] if k % 2 else sample.spacing,
                tag="/".join(parts),
            ))
    return variants
