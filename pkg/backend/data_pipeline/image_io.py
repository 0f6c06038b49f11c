"""
Image I/O: 16-bit binary PGM through Pillow, and a reader that dispatches
between PGM and DICOM on the file's magic bytes.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from backend.data_pipeline.dicom_reader import parse_dicom

logger = logging.getLogger("cardiac_fcn.data")

PGM_MAGIC = b"P5"
DICOM_MAGIC_OFFSET = 128


class ImageFormatError(ValueError):
    """Raised for image files that are neither binary PGM nor readable DICOM."""


def read_pgm(path: str) -> np.ndarray:
    """Binary PGM (P5) as a uint16 array (rows, cols); 8-bit files are widened."""
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode not in ("L", "I", "I;16", "I;16B"):
                raise ImageFormatError(f"{path}: expected a grayscale binary PGM, got {img.format} {img.mode}")
            pixels = np.array(img)
    except UnidentifiedImageError as e:
        raise ImageFormatError(f"{path}: not a PGM image") from e
    if pixels.min() < 0 or pixels.max() > 65535:
        raise ImageFormatError(f"{path}: pixel values outside the 16-bit range")
    return pixels.astype(np.uint16)


def write_pgm(pixels: np.ndarray, path: str) -> None:
    """Write a 2D array as 16-bit binary PGM (maxval 65535, big-endian samples)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ImageFormatError(f"expected a 2D image, got shape {pixels.shape}")
    if pixels.size and (pixels.min() < 0 or pixels.max() > 65535):
        raise ImageFormatError("PGM pixel values must lie in [0, 65535]")
    Image.fromarray(pixels.astype(np.int32)).save(path, format="PPM")


def read_image(path: str) -> Tuple[np.ndarray, Optional[Tuple[float, float]]]:
    """
    Load a PGM or DICOM image.

    Returns the pixel grid and the DICOM PixelSpacing (row_mm, col_mm), or None
    for PGM files, which carry no spacing.
    """
    with open(path, "rb") as f:
        head = f.read(DICOM_MAGIC_OFFSET + 4)

    if head[:2] == PGM_MAGIC:
        return read_pgm(path), None

    # preamble + "DICM", or a headerless dataset left for pydicom to probe
    with open(path, "rb") as f:
        data = f.read()
    try:
        image = parse_dicom(data, source=path)
    except ValueError as e:
        if head[DICOM_MAGIC_OFFSET:DICOM_MAGIC_OFFSET + 4] == b"DICM":
            raise
        raise ImageFormatError(f"{path}: neither binary PGM nor DICOM ({e})") from e
    return image.pixels, image.spacing
