"""
DICOM Reader Module
-------------------
Reads the uncompressed subset of DICOM the datasets ship in.

Supported: Implicit VR Little Endian and Explicit VR Little Endian, with or
without the 128-byte preamble + "DICM" header (headerless files are probed
by pydicom). Everything else (JPEG, RLE, deflate, big endian) raises
UnsupportedTransferSyntaxError before any pixel is touched.

Only the tags the pipeline needs are extracted: Rows, Columns, BitsAllocated,
PixelRepresentation, PixelSpacing and PixelData.
"""

import io
import logging
import os
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from pydicom import dcmread
from pydicom.dataset import Dataset, FileDataset, FileMetaDataset
from pydicom.errors import InvalidDicomError
from pydicom.filewriter import dcmwrite
from pydicom.uid import ExplicitVRLittleEndian, ImplicitVRLittleEndian, MRImageStorage, generate_uid
from pydicom.valuerep import DSfloat

logger = logging.getLogger("cardiac_fcn.dicom")

SUPPORTED_SYNTAXES = (ImplicitVRLittleEndian, ExplicitVRLittleEndian)


class DicomError(ValueError):
    """Raised for unreadable DICOM input or missing required tags."""


class UnsupportedTransferSyntaxError(DicomError):
    """Raised for compressed, encapsulated or big-endian transfer syntaxes."""


@dataclass(frozen=True)
class DicomImage:
    rows: int
    cols: int
    spacing: Tuple[float, float]
    bits_allocated: int
    pixels: np.ndarray
    source: str = ""


def _pixel_dtype(bits_allocated: int, signed: bool) -> np.dtype:
    if bits_allocated == 16:
        return np.dtype("<i2" if signed else "<u2")
    if bits_allocated == 8:
        return np.dtype("i1" if signed else "u1")
    raise DicomError(f"BitsAllocated={bits_allocated} is not supported (8 or 16 only)")


def _require(ds: Dataset, keyword: str, source: str):
    if keyword not in ds:
        raise DicomError(f"{source}: missing required tag {keyword}")
    return ds.data_element(keyword).value


def parse_dicom(data: bytes, source: str = "<bytes>") -> DicomImage:
    """
    Decode a DICOM byte string.

    ================================================

    inputs:
    data: file contents
    source: identifier used in errors and kept on the image

    outputs:
    DicomImage with pixels shaped (rows, cols) and spacing (row_mm, col_mm)

    ================================================
    """
    try:
        ds = dcmread(io.BytesIO(data), force=True)
    except (InvalidDicomError, EOFError, ValueError, KeyError, OSError) as e:
        raise DicomError(f"{source}: unreadable DICOM data ({e})") from e

    file_meta = getattr(ds, "file_meta", None)
    syntax = file_meta.get("TransferSyntaxUID") if file_meta is not None else None
    if syntax is not None and syntax not in SUPPORTED_SYNTAXES:
        name = getattr(syntax, "name", str(syntax))
        raise UnsupportedTransferSyntaxError(f"{source}: transfer syntax {name} ({syntax}) is not supported")
    if not ds.is_little_endian:
        raise UnsupportedTransferSyntaxError(f"{source}: big endian data is not supported")

    rows = int(_require(ds, "Rows", source))
    cols = int(_require(ds, "Columns", source))
    bits = int(_require(ds, "BitsAllocated", source))
    signed = int(ds.get("PixelRepresentation", 0)) == 1
    samples = int(ds.get("SamplesPerPixel", 1))
    if samples != 1:
        raise DicomError(f"{source}: SamplesPerPixel={samples}, only single-channel images are supported")

    spacing_value = _require(ds, "PixelSpacing", source)
    try:
        spacing = tuple(float(v) for v in spacing_value)
    except (TypeError, ValueError) as e:
        raise DicomError(f"{source}: malformed PixelSpacing {spacing_value!r}") from e
    if len(spacing) != 2 or min(spacing) <= 0:
        raise DicomError(f"{source}: PixelSpacing must be two positive values, got {spacing_value!r}")

    payload = _require(ds, "PixelData", source)
    dtype = _pixel_dtype(bits, signed)
    expected = rows * cols * dtype.itemsize
    # odd-length payloads carry one pad byte
    if len(payload) not in (expected, expected + 1):
        raise DicomError(f"{source}: PixelData holds {len(payload)} bytes, expected {expected} for {rows}x{cols}")
    pixels = np.frombuffer(payload, dtype=dtype, count=rows * cols).reshape(rows, cols)

    return DicomImage(rows=rows, cols=cols, spacing=(spacing[0], spacing[1]), bits_allocated=bits,
                      pixels=pixels.astype(dtype.newbyteorder("=")), source=source)


def read_dicom(path: str) -> DicomImage:
    with open(path, "rb") as f:
        return parse_dicom(f.read(), source=os.path.basename(path))


def write_dicom(pixels: np.ndarray, spacing: Tuple[float, float] = (1.0, 1.0), path: Optional[str] = None,
                implicit: bool = False, headerless: bool = False) -> bytes:
    """
    Encode a single-frame MR image as uncompressed little-endian DICOM.

    16-bit when the pixels need it, signed when any value is negative. `headerless` writes a
    bare implicit-VR dataset with no preamble or file meta. Returns the bytes, and also writes
    them to `path` when given.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise DicomError(f"expected a 2D image, got shape {pixels.shape}")
    signed = bool(pixels.size) and pixels.min() < 0
    bits = 8 if pixels.dtype.itemsize == 1 else 16
    dtype = _pixel_dtype(bits, signed)

    if headerless:
        ds: Union[Dataset, FileDataset] = Dataset()
        implicit = True
    else:
        meta = FileMetaDataset()
        meta.MediaStorageSOPClassUID = MRImageStorage
        meta.MediaStorageSOPInstanceUID = generate_uid()
        meta.TransferSyntaxUID = ImplicitVRLittleEndian if implicit else ExplicitVRLittleEndian
        ds = FileDataset("", {}, file_meta=meta, preamble=b"\0" * 128)
        ds.SOPClassUID = MRImageStorage
        ds.SOPInstanceUID = meta.MediaStorageSOPInstanceUID
    ds.is_little_endian = True
    ds.is_implicit_VR = implicit

    ds.Modality = "MR"
    ds.SamplesPerPixel = 1
    ds.PhotometricInterpretation = "MONOCHROME2"
    ds.Rows, ds.Columns = pixels.shape
    ds.BitsAllocated = bits
    ds.BitsStored = bits
    ds.HighBit = bits - 1
    ds.PixelRepresentation = 1 if signed else 0
    ds.PixelSpacing = [DSfloat(float(v), auto_format=True) for v in spacing]
    ds.PixelData = pixels.astype(dtype).tobytes()

    buffer = io.BytesIO()
    dcmwrite(buffer, ds, write_like_original=headerless)
    data = buffer.getvalue()
    if path is not None:
        with open(path, "wb") as f:
            f.write(data)
        logger.debug(f"Wrote {pixels.shape[0]}x{pixels.shape[1]} DICOM to {path}")
    return data
