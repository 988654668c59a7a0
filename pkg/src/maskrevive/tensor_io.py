"""Bit-exact NPY v1.0 I/O for dense 2-D weight matrices and named layer sets.

Only the minimal interchange contract is supported: NPY format version 1.0,
little-endian float32/float64 payloads, C order, 2-D shapes. Anything else is
rejected loudly rather than coerced. All matrices are held as float64
internally; float32 files are widened bit-exactly on load.
"""

from __future__ import annotations

import ast
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = b"\x93NUMPY"
_SUPPORTED_DESCRS = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class NpyFormatError(ValueError):
    """File is not a well-formed NPY v1.0 matrix dump."""


class UnsupportedDtypeError(NpyFormatError):
    """Payload dtype is not little-endian f4 or f8."""


class ShapeError(NpyFormatError):
    """Payload is not a non-empty 2-D array."""


class NonFiniteDataError(ValueError):
    """Payload contains NaN or Inf entries."""


class EmptyLayerSetError(ValueError):
    """A layer-set glob matched no files."""


@dataclass(frozen=True)
class WeightMatrix:
    """A dense real matrix with a layer name.

    `data` is always float64, C-contiguous, finite, and marked read-only;
    treat instances as immutable values.
    """

    data: np.ndarray
    name: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"weight matrix must be 2-D, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"weight matrix must be non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteDataError("weight matrix contains NaN or Inf entries")
        arr = np.ascontiguousarray(arr)
        if arr is self.data:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "WeightMatrix":
        """New matrix with the same name and different values."""
        return WeightMatrix(data, self.name)


@dataclass(frozen=True)
class LayerSet:
    """An ordered collection of uniquely named weight matrices.

    Layers are kept sorted by name so that save/load round-trips preserve
    order exactly.
    """

    layers: tuple[WeightMatrix, ...] = field(default_factory=tuple)

    def __post_init__(self):
        layers = tuple(sorted(self.layers, key=lambda m: m.name))
        names = [m.name for m in layers]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate layer names: {dupes}")
        object.__setattr__(self, "layers", layers)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, name: str) -> WeightMatrix:
        for m in self.layers:
            if m.name == name:
                return m
        raise KeyError(name)


def _build_header(descr: str, rows: int, cols: int) -> bytes:
    header = "{'descr': '%s', 'fortran_order': False, 'shape': (%d, %d), }" % (
        descr,
        rows,
        cols,
    )
    # magic(6) + version(2) + header-length field(2) + header + '\n',
    # space-padded so the payload starts on a 64-byte boundary
    unpadded = len(_MAGIC) + 2 + 2 + len(header) + 1
    header = header + " " * (-unpadded % 64) + "\n"
    return header.encode("latin1")


def _parse_header(raw: bytes) -> tuple[str, int, int]:
    try:
        text = raw.decode("latin1")
        meta = ast.literal_eval(text)
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"unparseable NPY header: {exc}") from exc
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise NpyFormatError(f"unexpected NPY header keys: {meta!r}")
    descr = meta["descr"]
    if descr not in _SUPPORTED_DESCRS:
        raise UnsupportedDtypeError(f"unsupported dtype {descr!r}, need '<f4' or '<f8'")
    if meta["fortran_order"] is not False:
        raise NpyFormatError("fortran-order payloads are not supported")
    shape = meta["shape"]
    if (
        not isinstance(shape, tuple)
        or len(shape) != 2
        or not all(isinstance(d, int) for d in shape)
    ):
        raise ShapeError(f"need a 2-D shape, got {shape!r}")
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ShapeError(f"need a non-empty matrix, got shape {shape!r}")
    return descr, rows, cols


def read_matrix(path) -> WeightMatrix:
    """Load a 2-D NPY v1.0 file as a WeightMatrix named after the file stem.

    float32 payloads are widened to float64 without changing any value.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise NpyFormatError(f"{path}: bad magic {magic!r}")
        version = fh.read(2)
        if version != b"\x01\x00":
            raise NpyFormatError(
                f"{path}: unsupported NPY version {tuple(version)}, need (1, 0)"
            )
        raw_len = fh.read(2)
        if len(raw_len) != 2:
            raise NpyFormatError(f"{path}: truncated header length field")
        (header_len,) = struct.unpack("<H", raw_len)
        raw_header = fh.read(header_len)
        if len(raw_header) != header_len:
            raise NpyFormatError(f"{path}: truncated header")
        descr, rows, cols = _parse_header(raw_header)
        dtype = _SUPPORTED_DESCRS[descr]
        nbytes = rows * cols * dtype.itemsize
        payload = fh.read(nbytes)
        if len(payload) != nbytes:
            raise NpyFormatError(
                f"{path}: payload has {len(payload)} bytes, expected {nbytes}"
            )
        if fh.read(1):
            raise NpyFormatError(f"{path}: trailing bytes after payload")
    values = np.frombuffer(payload, dtype=dtype).reshape(rows, cols)
    values = values.astype(np.float64)
    if not np.isfinite(values).all():
        raise NonFiniteDataError(f"{path}: non-finite entries in payload")
    return WeightMatrix(values, name=path.stem)


def write_matrix(m: WeightMatrix, path, dtype: str = "f8") -> None:
    """Write a WeightMatrix as NPY v1.0 at the requested precision."""
    if dtype not in ("f4", "f8"):
        raise ValueError(f"dtype must be 'f4' or 'f8', got {dtype!r}")
    descr = "<" + dtype
    payload = np.ascontiguousarray(m.data.astype(_SUPPORTED_DESCRS[descr]))
    header = _build_header(descr, m.rows, m.cols)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(b"\x01\x00")
        fh.write(struct.pack("<H", len(header)))
        fh.write(header)
        fh.write(payload.tobytes())


def load_layer_set(directory, pattern: str) -> LayerSet:
    """Load every NPY file matching `pattern` under `directory`, name-sorted."""
    directory = Path(directory)
    matches = sorted(p for p in directory.glob(pattern) if p.is_file())
    if not matches:
        raise EmptyLayerSetError(f"pattern {pattern!r} matched no files in {directory}")
    return LayerSet(tuple(read_matrix(p) for p in matches))


def save_layer_set(layer_set: LayerSet, directory, dtype: str = "f8") -> None:
    """Write each layer to `directory` as `<name>.npy`. The empty set is a no-op."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m in layer_set:
        write_matrix(m, directory / f"{m.name}.npy", dtype=dtype)
