"""
Weight Store Module
-------------------
Named parameter blobs for a NetworkSpec, their initialization and the FCNW file format.

File layout (all integers little-endian):

    b"FCNW" | version u32 (=1) | layer count u32
    per layer: name length u16 | utf-8 name | blob count u8
    per blob:  rank u8 | dims u32 * rank | float32 values, row-major

Layers are matched by name, which is what lets a model trained on one dataset
seed another: `load_weights(..., strict=False)` keeps only the layers whose
name and shapes agree with the target spec.
"""

import logging
import os
import struct
from collections import OrderedDict
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fcn.network_spec import NetworkSpec, param_shapes

logger = logging.getLogger("cardiac_fcn.fcn")

MAGIC = b"FCNW"
VERSION = 1


class SpecMismatchError(ValueError):
    """Raised when a weight store does not fit the spec it is used with."""


class WeightFileError(ValueError):
    """Raised for unreadable, truncated or corrupt weight files."""


class WeightStore:
    """
    Ordered map of layer name to parameter blobs ([weights, bias]).

    Blobs are float32 numpy arrays owned by the store; the optimizer updates them in place.
    """

    def __init__(self, blobs: Optional[Mapping[str, Sequence[np.ndarray]]] = None):
        self._blobs: "OrderedDict[str, List[np.ndarray]]" = OrderedDict()
        for name, arrays in (blobs or {}).items():
            self.set(name, arrays)

    def set(self, name: str, arrays: Sequence[np.ndarray]) -> None:
        self._blobs[name] = [np.array(a, dtype=np.float32) for a in arrays]

    def __getitem__(self, name: str) -> List[np.ndarray]:
        return self._blobs[name]

    def __contains__(self, name: str) -> bool:
        return name in self._blobs

    def __iter__(self) -> Iterator[str]:
        return iter(self._blobs)

    def __len__(self) -> int:
        return len(self._blobs)

    def items(self):
        return self._blobs.items()

    def shapes(self) -> Dict[str, List[Tuple[int, ...]]]:
        return {name: [a.shape for a in arrays] for name, arrays in self._blobs.items()}

    def num_params(self) -> int:
        return sum(a.size for arrays in self._blobs.values() for a in arrays)

    def copy(self) -> "WeightStore":
        return WeightStore(self._blobs)

    def astype(self, dtype) -> "WeightStore":
        """Copy with every blob cast to `dtype` (float64 stores back the gradient checks)."""
        store = WeightStore()
        store._blobs = OrderedDict((name, [a.astype(dtype) for a in arrays]) for name, arrays in self._blobs.items())
        return store

    def equals(self, other: "WeightStore") -> bool:
        """Bitwise equality of names, shapes and values."""
        if list(self._blobs) != list(other._blobs):
            return False
        for name, arrays in self._blobs.items():
            theirs = other._blobs[name]
            if len(arrays) != len(theirs):
                return False
            for a, b in zip(arrays, theirs):
                if a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
        return True


def bilinear_kernel(size: int) -> np.ndarray:
    """2D bilinear interpolation filter of the given size."""
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size, dtype=np.float64)
    line = 1 - np.abs(og - center) / factor
    return np.outer(line, line)


def init_bilinear(in_channels: int, out_channels: int, kernel: int) -> np.ndarray:
    """Upsample weights (in, out, k, k) that bilinearly interpolate each channel onto itself."""
    weights = np.zeros((in_channels, out_channels, kernel, kernel), dtype=np.float32)
    filt = bilinear_kernel(kernel)
    for c in range(min(in_channels, out_channels)):
        weights[c, c] = filt
    return weights


def init_xavier(spec: NetworkSpec, seed: int, layers: Optional[Sequence[str]] = None) -> WeightStore:
    """
    Fresh weights for `spec`.

    Conv and score-conv weights are drawn from U[-sqrt(3/fan_in), +sqrt(3/fan_in)] with
    fan_in = inC*kh*kw; upsample layers start as bilinear interpolation; biases are zero.
    Draws follow spec order from one generator seeded with `seed`, so a given seed always
    yields the same store. `layers` restricts initialization to a subset (by name).
    """
    rng = np.random.default_rng(seed)
    store = WeightStore()
    wanted = set(layers) if layers is not None else None
    for name, (w_shape, b_shape) in param_shapes(spec).items():
        if wanted is not None and name not in wanted:
            continue
        kind = spec.layer(name).kind
        if kind == "upsample":
            weights = init_bilinear(w_shape[0], w_shape[1], w_shape[2])
        else:
            fan_in = w_shape[1] * w_shape[2] * w_shape[3]
            limit = np.sqrt(3.0 / fan_in)
            weights = rng.uniform(-limit, limit, size=w_shape).astype(np.float32)
        store._blobs[name] = [weights, np.zeros(b_shape, dtype=np.float32)]
    return store


def missing_layers(spec: NetworkSpec, store: WeightStore) -> List[str]:
    """Spec layers the store has no (correctly shaped) blobs for, in spec order."""
    missing = []
    for name, shapes in param_shapes(spec).items():
        if name not in store or [a.shape for a in store[name]] != [tuple(s) for s in shapes]:
            missing.append(name)
    return missing


def check_store(spec: NetworkSpec, store: WeightStore) -> None:
    """Raise SpecMismatchError unless every parameterized layer of `spec` is present with matching shapes."""
    expected = param_shapes(spec)
    for name, shapes in expected.items():
        if name not in store:
            raise SpecMismatchError(f"weights missing for layer '{name}'")
        found = [a.shape for a in store[name]]
        if found != [tuple(s) for s in shapes]:
            raise SpecMismatchError(f"layer '{name}' expects shapes {shapes}, weights have {found}")
    extra = [name for name in store if name not in expected]
    if extra:
        raise SpecMismatchError(f"weights for layers not in the spec: {', '.join(extra)}")


def save_weights(store: WeightStore, path: str) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, arrays in store.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", len(arrays)))
        for array in arrays:
            chunks.append(struct.pack("<B", array.ndim))
            chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
            chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())

    # write-then-rename so a crash never leaves a half-written file under `path`
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp_path, path)
    logger.info(f"Saved {len(store)} layers ({store.num_params():,} parameters) to {path}")


class _Reader:
    def __init__(self, buffer: bytes, path: str):
        self.buffer = buffer
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.buffer):
            raise WeightFileError(f"{self.path}: truncated at byte {self.offset} (needed {size} more)")
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_weight_file(path: str) -> WeightStore:
    """Decode an FCNW file as-is, without reference to any spec."""
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)

    if reader.take(4) != MAGIC:
        raise WeightFileError(f"{path}: not a weight file (bad magic)")
    version, layer_count = reader.unpack("<II")
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported weight file version {version}")

    blobs: "OrderedDict[str, List[np.ndarray]]" = OrderedDict()
    for _ in range(layer_count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise WeightFileError(f"{path}: layer name is not valid utf-8") from e
        if name in blobs:
            raise WeightFileError(f"{path}: duplicate layer '{name}'")
        (blob_count,) = reader.unpack("<B")
        arrays = []
        for _ in range(blob_count):
            (rank,) = reader.unpack("<B")
            dims = reader.unpack(f"<{rank}I")
            count = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(reader.take(4 * count), dtype="<f4")
            arrays.append(values.reshape(dims).astype(np.float32))
        blobs[name] = arrays

    if reader.offset != len(reader.buffer):
        raise WeightFileError(f"{path}: {len(reader.buffer) - reader.offset} trailing bytes after last layer")

    store = WeightStore()
    store._blobs = blobs
    return store


def load_weights(path: str, spec: Optional[NetworkSpec] = None, strict: bool = True) -> WeightStore:
    """
    Read a weight file, optionally against a spec.

    strict: the file must cover the spec exactly (SpecMismatchError otherwise).
    non-strict: only layers whose name and shapes match the spec are returned;
    `missing_layers(spec, store)` gives the skipped set for the caller to initialize.
    """
    raw = read_weight_file(path)
    if spec is None:
        return raw
    if strict:
        check_store(spec, raw)
        return raw

    expected = param_shapes(spec)
    store = WeightStore()
    for name, shapes in expected.items():
        if name in raw and [a.shape for a in raw[name]] == [tuple(s) for s in shapes]:
            store._blobs[name] = raw[name]
    skipped = [name for name in expected if name not in store]
    logger.info(f"Transplanted {len(store)} layers from {path}; skipped {len(skipped)}: {', '.join(skipped) or '-'}")
    return store
