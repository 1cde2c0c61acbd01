"""Opening file-backed input volumes.

Two formats are accepted:

* a chunked array directory (see :mod:`tessellate.store`);
* a raw little-endian float32 file with a JSON sidecar ``<file>.json``
  holding ``{"shape": [...], "axes": "NCZYX"}``. ``axes`` may be any
  permutation of ``N``, ``C`` and two or three of ``Z``, ``Y``, ``X``; a
  missing ``N`` or ``C`` becomes a length-1 axis. The raw file is memory
  mapped, never loaded whole.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import store
from .errors import FormatError, UnrecognizedArtifactError

RAW_FORMAT = "tessellate-raw/1"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _canonical_axes(axes: str) -> str:
    spatial = "".join(a for a in "ZYX" if a in axes)
    return "NC" + spatial


def open_raw(path):
    path = Path(path)
    try:
        header = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError:
        raise UnrecognizedArtifactError(f"{path}: raw volume needs a sidecar {sidecar_path(path).name}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{sidecar_path(path)}: invalid JSON ({exc})") from exc
    shape = tuple(int(s) for s in header["shape"])
    axes = header.get("axes") or ("NCZYX" if len(shape) == 5 else "NCYX")
    if len(axes) != len(shape) or len(set(axes)) != len(axes) or set(axes) - set("NCZYX"):
        raise FormatError(f"axes {axes!r} do not describe shape {shape}")
    spatial = [a for a in axes if a in "ZYX"]
    if len(spatial) not in (2, 3) or (len(spatial) == 2 and "Z" in spatial):
        raise FormatError(f"axes {axes!r} must name Y, X and optionally Z")
    if np.dtype(header.get("dtype", "<f4")) != np.dtype("<f4"):
        raise FormatError("raw volumes must be little-endian float32")
    expected = 4 * int(np.prod(shape))
    size = path.stat().st_size
    if size != expected:
        raise FormatError(f"{path} has {size} bytes, header implies {expected}")
    arr = np.memmap(path, dtype="<f4", mode="r", shape=shape)
    for a in "NC":
        if a not in axes:
            arr = arr[np.newaxis]
            axes = a + axes
    target = _canonical_axes(axes)
    return arr.transpose([axes.index(a) for a in target])


def write_raw(path, array, axes: str | None = None) -> None:
    """Write ``array`` as raw float32 plus sidecar header."""
    path = Path(path)
    array = np.ascontiguousarray(array, dtype="<f4")
    array.tofile(path)
    header = {"format": RAW_FORMAT, "shape": list(array.shape), "dtype": "<f4"}
    if axes:
        header["axes"] = axes
    sidecar_path(path).write_text(json.dumps(header))


def open_volume(path):
    """Open a volume as a sliceable ``(N, C, [Z,] Y, X)`` array-like."""
    path = Path(path)
    if store.is_array(path):
        return store.open_array(path)
    if path.is_file() and sidecar_path(path).is_file():
        return open_raw(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume: {path}")
    raise UnrecognizedArtifactError(f"{path} is neither a chunked array nor a raw volume with sidecar")
