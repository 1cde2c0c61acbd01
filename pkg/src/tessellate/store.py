"""A small on-disk chunked float32 array store.

The layout on disk is the zarr v2 format restricted to uncompressed,
little-endian float32, C-ordered arrays with "." separated chunk keys::

    root/
      .zarray        JSON metadata
      .zattrs        optional JSON attributes
      0.0.1          one raw file per chunk, always full chunk size

Chunks that were never written do not exist and read as ``fill_value``.
Every chunk write goes to a temporary file that is then renamed over the
target, so readers never see a half-written chunk.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import AlreadyExistsError, FormatError, ShapeError

DTYPE = np.dtype("<f4")
META_KEY = ".zarray"
ATTRS_KEY = ".zattrs"


def _encode_fill(value: float):
    if math.isnan(value):
        return "NaN"
    if math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    return float(value)


def _decode_fill(value) -> float:
    if value is None:
        return 0.0
    if isinstance(value, str):
        try:
            return {"NaN": math.nan, "Infinity": math.inf, "-Infinity": -math.inf}[value]
        except KeyError:
            raise FormatError(f"unsupported fill_value {value!r}") from None
    return float(value)


@dataclass(frozen=True)
class ArrayMetadata:
    shape: tuple[int, ...]
    chunks: tuple[int, ...]
    fill_value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "chunks", tuple(int(c) for c in self.chunks))
        object.__setattr__(self, "fill_value", float(self.fill_value))
        if len(self.shape) != len(self.chunks):
            raise ShapeError(f"shape {self.shape} and chunks {self.chunks} differ in rank")
        if any(s < 0 for s in self.shape) or any(c < 1 for c in self.chunks):
            raise ShapeError(f"invalid shape {self.shape} / chunks {self.chunks}")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def grid(self) -> tuple[int, ...]:
        return tuple(-(-s // c) for s, c in zip(self.shape, self.chunks))

    @property
    def chunk_nbytes(self) -> int:
        return DTYPE.itemsize * math.prod(self.chunks)

    def to_json(self) -> dict:
        return {
            "chunks": list(self.chunks),
            "compressor": None,
            "dtype": DTYPE.str,
            "fill_value": _encode_fill(self.fill_value),
            "filters": None,
            "order": "C",
            "shape": list(self.shape),
            "zarr_format": 2,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ArrayMetadata":
        try:
            if doc["zarr_format"] != 2:
                raise FormatError(f"unsupported zarr_format {doc['zarr_format']}")
            if np.dtype(doc["dtype"]) != DTYPE or doc["dtype"] not in ("<f4", "|f4"):
                raise FormatError(f"unsupported dtype {doc['dtype']!r}, only '<f4' is handled")
            if doc.get("compressor") is not None:
                raise FormatError("compressed arrays are not supported")
            if doc.get("filters"):
                raise FormatError("filters are not supported")
            if doc.get("order", "C") != "C":
                raise FormatError("only C-ordered arrays are supported")
            if doc.get("dimension_separator", ".") != ".":
                raise FormatError("only '.' chunk key separators are supported")
            return cls(tuple(doc["shape"]), tuple(doc["chunks"]), _decode_fill(doc.get("fill_value")))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed array metadata: {exc}") from exc


def chunk_key(indices: Sequence[int], grid: Sequence[int] | None = None) -> str:
    """Zarr v2 chunk file name: indices joined by ``"."``.

    >>> chunk_key((0, 1, 2))
    '0.1.2'
    """
    indices = tuple(int(i) for i in indices)
    if not indices:
        raise ShapeError("chunk indices must have at least one axis")
    if grid is not None:
        if len(grid) != len(indices):
            raise ShapeError(f"chunk indices {indices} do not match grid rank {len(grid)}")
        bad = [i for i, g in zip(indices, grid) if not 0 <= i < g]
        if bad:
            raise IndexError(f"chunk indices {indices} outside grid {tuple(grid)}")
    elif any(i < 0 for i in indices):
        raise IndexError(f"negative chunk index in {indices}")
    return ".".join(str(i) for i in indices)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix="-" + path.name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class ChunkedArray:
    """Handle on a chunked array rooted at a directory.

    Instances are cheap; open one with :func:`open_array` or make a new
    array with :func:`create`. Basic slicing (``arr[0, :, 2:5]``) reads
    through :meth:`read_region`.
    """

    def __init__(self, root, metadata: ArrayMetadata):
        self.root = Path(root)
        self.metadata = metadata
        self._locks: dict[tuple[int, ...], threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def __repr__(self):
        return f"ChunkedArray({str(self.root)!r}, shape={self.shape}, chunks={self.chunks})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.metadata.shape

    @property
    def chunks(self) -> tuple[int, ...]:
        return self.metadata.chunks

    @property
    def ndim(self) -> int:
        return self.metadata.ndim

    @property
    def dtype(self) -> np.dtype:
        return DTYPE

    # chunk level

    def chunk_key(self, idx: Sequence[int]) -> str:
        return chunk_key(idx, self.metadata.grid)

    def chunk_path(self, idx: Sequence[int]) -> Path:
        return self.root / self.chunk_key(idx)

    def iter_chunk_indices(self) -> Iterator[tuple[int, ...]]:
        return itertools.product(*(range(g) for g in self.metadata.grid))

    def read_chunk(self, idx: Sequence[int]) -> np.ndarray:
        """Full-size chunk as a fresh writable array (fill value if absent)."""
        chunk = self._load_chunk(idx)
        if chunk is None:
            return np.full(self.chunks, self.metadata.fill_value, dtype=DTYPE)
        return chunk

    def _load_chunk(self, idx: Sequence[int]) -> np.ndarray | None:
        path = self.chunk_path(idx)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        if len(raw) != self.metadata.chunk_nbytes:
            raise FormatError(
                f"chunk {path.name!r} in {self.root} has {len(raw)} bytes, "
                f"expected {self.metadata.chunk_nbytes}"
            )
        return np.frombuffer(raw, dtype=DTYPE).reshape(self.chunks).copy()

    def encode_chunk(self, data: np.ndarray) -> bytes:
        data = np.asarray(data)
        if data.shape != self.chunks:
            raise ShapeError(f"chunk data shape {data.shape} != chunk shape {self.chunks}")
        return np.ascontiguousarray(data, dtype=DTYPE).tobytes()

    def write_chunk(self, idx: Sequence[int], data: np.ndarray) -> None:
        atomic_write_bytes(self.chunk_path(idx), self.encode_chunk(data))

    @contextmanager
    def chunk_lock(self, idx: Sequence[int]):
        """Exclusive in-process ownership of one chunk for read-modify-write."""
        idx = tuple(idx)
        with self._locks_guard:
            lock = self._locks.setdefault(idx, threading.Lock())
        with lock:
            yield

    def valid_extent(self, idx: Sequence[int]) -> tuple[slice, ...]:
        """Slices selecting the in-bounds part of a (possibly trailing) chunk."""
        return tuple(
            slice(0, min(c, s - i * c)) for i, c, s in zip(idx, self.chunks, self.shape)
        )

    # region level

    def _check_region(self, start: Sequence[int], shape: Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
        start = tuple(int(s) for s in start)
        shape = tuple(int(s) for s in shape)
        if len(start) != self.ndim or len(shape) != self.ndim:
            raise ShapeError(f"region rank does not match array rank {self.ndim}")
        for a, (s, n, ext) in enumerate(zip(start, shape, self.shape)):
            if s < 0 or n < 0 or s + n > ext:
                raise IndexError(f"axis {a}: region [{s}, {s + n}) outside [0, {ext})")
        return start, shape

    def region_chunks(self, start: Sequence[int], shape: Sequence[int]):
        """Yield ``(chunk_index, chunk_selection, block_selection)`` for a region.

        ``chunk_selection`` indexes into the full chunk, ``block_selection``
        into a dense block of shape ``shape`` placed at ``start``.
        """
        start, shape = self._check_region(start, shape)
        if 0 in shape:
            return
        ranges = [
            range(s // c, (s + n - 1) // c + 1) for s, n, c in zip(start, shape, self.chunks)
        ]
        for idx in itertools.product(*ranges):
            csel, bsel = [], []
            for i, s, n, c in zip(idx, start, shape, self.chunks):
                lo = max(s, i * c)
                hi = min(s + n, (i + 1) * c)
                csel.append(slice(lo - i * c, hi - i * c))
                bsel.append(slice(lo - s, hi - s))
            yield idx, tuple(csel), tuple(bsel)

    def read_region(self, start: Sequence[int], shape: Sequence[int]) -> np.ndarray:
        start, shape = self._check_region(start, shape)
        out = np.empty(shape, dtype=DTYPE)
        for idx, csel, bsel in self.region_chunks(start, shape):
            chunk = self._load_chunk(idx)
            out[bsel] = self.metadata.fill_value if chunk is None else chunk[csel]
        return out

    def write_region(self, start: Sequence[int], values) -> None:
        values = np.asarray(values, dtype=DTYPE)
        if values.ndim != self.ndim:
            raise ShapeError(f"values have rank {values.ndim}, array has rank {self.ndim}")
        start, shape = self._check_region(start, values.shape)
        for idx, csel, bsel in self.region_chunks(start, shape):
            full = all(
                (sl.stop - sl.start) == c for sl, c in zip(csel, self.chunks)
            )
            with self.chunk_lock(idx):
                chunk = np.empty(self.chunks, DTYPE) if full else self.read_chunk(idx)
                chunk[csel] = values[bsel]
                self.write_chunk(idx, chunk)

    def add_region(self, start: Sequence[int], values) -> None:
        """In-place ``array[region] += values``, atomic per chunk."""
        values = np.asarray(values, dtype=DTYPE)
        if values.ndim != self.ndim:
            raise ShapeError(f"values have rank {values.ndim}, array has rank {self.ndim}")
        for idx, csel, bsel in self.region_chunks(start, values.shape):
            with self.chunk_lock(idx):
                chunk = self.read_chunk(idx)
                chunk[csel] += values[bsel]
                self.write_chunk(idx, chunk)

    def read(self) -> np.ndarray:
        return self.read_region((0,) * self.ndim, self.shape)

    def __getitem__(self, key) -> np.ndarray:
        if not isinstance(key, tuple):
            key = (key,)
        if any(k is Ellipsis for k in key):
            i = key.index(Ellipsis)
            key = key[:i] + (slice(None),) * (self.ndim - len(key) + 1) + key[i + 1:]
        key = key + (slice(None),) * (self.ndim - len(key))
        if len(key) != self.ndim:
            raise IndexError(f"too many indices for array of rank {self.ndim}")
        start, shape, squeeze = [], [], []
        for axis, (k, ext) in enumerate(zip(key, self.shape)):
            if isinstance(k, slice):
                lo, hi, st = k.indices(ext)
                if st != 1:
                    raise IndexError("only unit-stride slices are supported")
                start.append(lo)
                shape.append(max(0, hi - lo))
            else:
                k = int(k)
                if k < 0:
                    k += ext
                start.append(k)
                shape.append(1)
                squeeze.append(axis)
        block = self.read_region(start, shape)
        return block.reshape([n for a, n in enumerate(shape) if a not in squeeze])

    # attributes

    @property
    def attrs(self) -> dict:
        path = self.root / ATTRS_KEY
        if not path.exists():
            return {}
        return json.loads(path.read_text())

    def set_attrs(self, attrs: dict) -> None:
        atomic_write_bytes(self.root / ATTRS_KEY, json.dumps(attrs, indent=4, sort_keys=True).encode())


def create(root, metadata: ArrayMetadata, attrs: dict | None = None) -> ChunkedArray:
    """Create an empty array at ``root``.

    Raises
    ------
    AlreadyExistsError
        If ``root`` already holds array metadata.
    OSError
        If the directory cannot be created or written.
    """
    root = Path(root)
    if (root / META_KEY).exists():
        raise AlreadyExistsError(f"an array already exists at {root}")
    root.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(root / META_KEY, json.dumps(metadata.to_json(), indent=4, sort_keys=True).encode())
    arr = ChunkedArray(root, metadata)
    if attrs:
        arr.set_attrs(attrs)
    return arr


def open_array(root) -> ChunkedArray:
    root = Path(root)
    path = root / META_KEY
    if not path.is_file():
        raise FileNotFoundError(f"no array metadata at {root}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return ChunkedArray(root, ArrayMetadata.from_json(doc))


def is_array(root) -> bool:
    return (Path(root) / META_KEY).is_file()
