"""Weighted reassembly of per-patch results into a full-size volume.

Each patch result is multiplied by its placement's weight map and added to a
"mean" accumulator; the weights themselves are added to a single-channel
"norm" accumulator. The stitched output is ``mean / norm``. Both
accumulators live on disk as chunked arrays, so the full volume never has to
fit in memory.

A stitch location is a directory::

    location/
      manifest.json   progress and settings (tessellate-stitch/1)
      plan.json       the patch plan
      mean/  norm/    accumulators
      output/         written by finalize
      journal/        staged chunk files for crash-safe streaming
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import store
from .errors import (
    AlreadyExistsError,
    CoverageError,
    FormatError,
    IncompleteInputError,
    InvalidSpecError,
    ShapeError,
)
from .geometry import PatchPlan, TensorLayout, WindowSpec, weight_map
from .subsample import patch_region

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "tessellate-stitch/1"
MANIFEST = "manifest.json"
PLAN_FILE = "plan.json"


@dataclass(frozen=True)
class StitchPolicy:
    """What to do with voxels that received no weight, and how many output channels."""

    output_channels: int = 1
    zero_coverage: str = "error"
    fill_value: float = 0.0

    def __post_init__(self):
        if self.output_channels < 1:
            raise InvalidSpecError(f"output_channels must be >= 1, got {self.output_channels}")
        if self.zero_coverage not in ("error", "fill"):
            raise InvalidSpecError(f"zero_coverage must be 'error' or 'fill', got {self.zero_coverage!r}")

    @classmethod
    def parse(cls, text: str, output_channels: int = 1) -> "StitchPolicy":
        """Build a policy from ``"error"`` or ``"fill:<value>"``."""
        if text == "error":
            return cls(output_channels, "error")
        if text.startswith("fill:"):
            try:
                value = float(text[5:])
            except ValueError:
                raise InvalidSpecError(f"bad fill value in {text!r}") from None
            return cls(output_channels, "fill", value)
        raise InvalidSpecError(f"zero-coverage policy must be 'error' or 'fill:V', got {text!r}")

    def to_dict(self) -> dict:
        return {
            "output_channels": self.output_channels,
            "zero_coverage": self.zero_coverage,
            "fill_value": self.fill_value,
        }


@dataclass
class Accumulators:
    location: Path
    plan: PatchPlan
    mean: store.ChunkedArray
    norm: store.ChunkedArray

    @property
    def spec(self) -> WindowSpec:
        return self.plan.spec

    @property
    def output_channels(self) -> int:
        return self.mean.shape[1]

    @property
    def output_path(self) -> Path:
        return self.location / "output"

    @property
    def output_metadata(self) -> store.ArrayMetadata:
        """Metadata the finalized output is created with (same grid as the mean)."""
        return self.mean.metadata

    @property
    def journal(self) -> Path:
        return self.location / "journal"

    def read_manifest(self) -> dict:
        return read_manifest(self.location)

    def update_manifest(self, **changes) -> dict:
        doc = self.read_manifest()
        doc.update(changes)
        store.atomic_write_bytes(self.location / MANIFEST, json.dumps(doc, indent=2).encode())
        return doc


def read_manifest(location) -> dict:
    path = Path(location) / MANIFEST
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path} is not a {MANIFEST_FORMAT} manifest")
    return doc


def _default_chunks(spec: WindowSpec, chunk_shape) -> tuple[int, ...]:
    if chunk_shape is None:
        return spec.window
    if isinstance(chunk_shape, int):
        chunk_shape = (chunk_shape,) * spec.rank
    chunk_shape = tuple(int(c) for c in chunk_shape)
    if len(chunk_shape) != spec.rank or min(chunk_shape) < 1:
        raise InvalidSpecError(f"chunk shape {chunk_shape} must have {spec.rank} axes, each >= 1")
    return chunk_shape


def create_accumulators(
    layout: TensorLayout,
    output_channels: int,
    plan: PatchPlan,
    chunk_shape: Sequence[int] | None,
    location,
) -> Accumulators:
    """Create zero-filled mean and norm arrays for stitching ``plan``.

    ``chunk_shape`` gives the spatial chunk extents and defaults to the
    window shape. Refuses to reuse an existing location.
    """
    if layout.items != plan.layout.items or layout.spatial != plan.layout.spatial:
        raise ShapeError(f"layout {layout.shape} does not match plan layout {plan.layout.shape}")
    if output_channels < 1:
        raise InvalidSpecError(f"output_channels must be >= 1, got {output_channels}")
    chunks = _default_chunks(plan.spec, chunk_shape)
    location = Path(location)
    if (location / MANIFEST).exists() or store.is_array(location / "mean"):
        raise AlreadyExistsError(f"stitch accumulators already exist at {location}")
    location.mkdir(parents=True, exist_ok=True)

    mean = store.create(
        location / "mean",
        store.ArrayMetadata((layout.items, output_channels, *layout.spatial), (1, output_channels, *chunks)),
    )
    norm = store.create(
        location / "norm",
        store.ArrayMetadata((layout.items, 1, *layout.spatial), (1, 1, *chunks)),
    )
    plan.save(location / PLAN_FILE)
    manifest = {
        "format": MANIFEST_FORMAT,
        "plan": PLAN_FILE,
        "layout": list(layout.with_channels(output_channels).shape),
        "spec": plan.spec.to_dict(),
        "chunk_shape": list(chunks),
        "total": len(plan),
        "accumulated": 0,
        "pending": None,
        "state": "accumulating",
        "policy": None,
        "coverage": None,
    }
    store.atomic_write_bytes(location / MANIFEST, json.dumps(manifest, indent=2).encode())
    return Accumulators(location, plan, mean, norm)


def open_accumulators(location) -> Accumulators:
    """Reopen a stitch location, replaying any half-committed streamed patch."""
    location = Path(location)
    doc = read_manifest(location)
    plan = PatchPlan.load(location / doc["plan"])
    acc = Accumulators(location, plan, store.open_array(location / "mean"), store.open_array(location / "norm"))
    _recover(acc, doc)
    return acc


def _recover(acc: Accumulators, doc: dict):
    pending = doc.get("pending")
    if pending:
        for src, dst in pending["moves"]:
            src = acc.location / src
            if src.exists():
                os.replace(src, acc.location / dst)
        logger.info("replayed staged patch %d at %s", pending["index"], acc.location)
        acc.update_manifest(accumulated=pending["index"] + 1, pending=None)
    if acc.journal.exists():
        shutil.rmtree(acc.journal)


def _check_result(acc: Accumulators, patch_index: int, patch_result) -> np.ndarray:
    result = np.asarray(patch_result, dtype=np.float32)
    expected = (acc.output_channels, *acc.spec.window)
    if result.shape != expected:
        raise ShapeError(f"patch result has shape {result.shape}, expected {expected}")
    if not 0 <= patch_index < len(acc.plan):
        raise IndexError(f"patch index {patch_index} out of range for plan with {len(acc.plan)} placements")
    return result


def _chunk_updates(acc: Accumulators, patch_index: int, result: np.ndarray):
    item, region = patch_region(acc.plan, patch_index)
    w = weight_map(acc.spec, acc.plan.placements[patch_index])
    weighted = (w * result)[None]
    start = (item, 0, *(lo for lo, _ in region))
    for arr, block in ((acc.mean, weighted), (acc.norm, w[None, None])):
        for idx, csel, bsel in arr.region_chunks(start, block.shape):
            yield arr, idx, csel, block[bsel]


def accumulate(acc: Accumulators, patch_index: int, patch_result) -> None:
    """Add one weighted patch result into the accumulators.

    ``patch_result`` has shape ``(C_out, *window)``. Each touched chunk is
    updated under its own lock, so calls from several threads are safe.
    """
    result = _check_result(acc, patch_index, patch_result)
    for arr, idx, csel, part in _chunk_updates(acc, patch_index, result):
        with arr.chunk_lock(idx):
            chunk = arr.read_chunk(idx)
            chunk[csel] += part
            arr.write_chunk(idx, chunk)


def _commit(acc: Accumulators, patch_index: int, patch_result) -> None:
    # stage every new chunk, record the moves, then rename; a crash at any
    # point either leaves the patch unapplied or replayable from the manifest
    result = _check_result(acc, patch_index, patch_result)
    acc.journal.mkdir(exist_ok=True)
    moves = []
    for arr, idx, csel, part in _chunk_updates(acc, patch_index, result):
        chunk = arr.read_chunk(idx)
        chunk[csel] += part
        name = arr.root.name
        staged = acc.journal / f"{name}-{arr.chunk_key(idx)}"
        staged.write_bytes(arr.encode_chunk(chunk))
        moves.append((f"journal/{staged.name}", f"{name}/{arr.chunk_key(idx)}"))
    acc.update_manifest(pending={"index": patch_index, "moves": moves})
    for src, dst in moves:
        os.replace(acc.location / src, acc.location / dst)
    acc.update_manifest(accumulated=patch_index + 1, pending=None)


def finalize(acc: Accumulators, policy: StitchPolicy, workers: int | None = None) -> store.ChunkedArray:
    """Divide mean by norm chunk by chunk and write the stitched output.

    Chunks are independent and are processed by a pool of ``workers``
    threads (default: CPU count).

    Raises
    ------
    CoverageError
        Under the ``"error"`` policy, if any voxel has zero total weight. No
        output array is left behind in that case.
    """
    if policy.output_channels != acc.output_channels:
        raise ShapeError(
            f"policy expects {policy.output_channels} output channels, accumulators hold {acc.output_channels}"
        )
    doc = acc.read_manifest()
    out_path = acc.output_path
    if doc["state"] == "finalized" and store.is_array(out_path):
        raise AlreadyExistsError(f"{acc.location} is already finalized")
    if out_path.exists():
        # leftover from an interrupted finalize; recomputed from scratch
        shutil.rmtree(out_path)
    out = store.create(out_path, acc.output_metadata)
    fill = np.float32(policy.fill_value)

    def run(idx):
        mean = acc.mean.read_chunk(idx)
        norm = acc.norm.read_chunk(idx)
        valid = acc.mean.valid_extent(idx)
        spatial = (slice(None), slice(None), *valid[2:])
        covered = norm > 0
        res = np.zeros_like(mean)
        np.divide(mean, norm, out=res, where=covered)
        zero = ~covered[spatial]
        n_zero = int(zero.sum())
        if n_zero and policy.zero_coverage == "fill":
            res[spatial][np.broadcast_to(zero, res[spatial].shape)] = fill
        padded = np.zeros_like(res)
        padded[valid] = res[valid]
        out.write_chunk(idx, padded)
        nv = norm[spatial]
        return n_zero, float(nv.min()), float(nv.max())

    workers = workers or os.cpu_count() or 1
    indices = list(acc.mean.iter_chunk_indices())
    with ThreadPoolExecutor(max_workers=workers) as pool:
        stats = list(pool.map(run, indices))
    zero_total = sum(s[0] for s in stats)
    coverage = {
        "zero_voxels": zero_total,
        "min_weight": min(s[1] for s in stats),
        "max_weight": max(s[2] for s in stats),
    }
    if zero_total and policy.zero_coverage == "error":
        shutil.rmtree(out_path)
        acc.update_manifest(coverage=coverage, policy=policy.to_dict())
        raise CoverageError(zero_total)
    acc.update_manifest(state="finalized", coverage=coverage, policy=policy.to_dict())
    return out


def stitch_stream(
    plan: PatchPlan,
    patch_results: Iterable,
    policy: StitchPolicy,
    location,
    chunk_shape: Sequence[int] | None = None,
    workers: int | None = None,
    resume: bool = False,
) -> store.ChunkedArray:
    """Create accumulators, add every patch result in plan order, and finalize.

    ``patch_results`` yields one ``(C_out, *window)`` array per placement.
    Progress is recorded after every patch; with ``resume=True`` an
    interrupted run at ``location`` continues where it stopped, skipping the
    results already applied.

    Raises
    ------
    IncompleteInputError
        If fewer than ``len(plan)`` results are supplied.
    """
    location = Path(location)
    if resume and (location / MANIFEST).exists():
        acc = open_accumulators(location)
        if not acc.plan.same_geometry(plan):
            raise ShapeError(f"plan stored at {location} differs from the one supplied")
        if acc.output_channels != policy.output_channels:
            raise ShapeError("output channel count differs from the stored accumulators")
        done = acc.read_manifest()["accumulated"]
    else:
        acc = create_accumulators(plan.layout, policy.output_channels, plan, chunk_shape, location)
        done = 0

    total = len(plan)
    if isinstance(patch_results, Sequence) or hasattr(patch_results, "__len__"):
        if len(patch_results) < total:
            raise IncompleteInputError(f"got {len(patch_results)} patch results, plan has {total}")
        if len(patch_results) > total:
            raise ShapeError(f"got {len(patch_results)} patch results, plan has {total}")
        results = (patch_results[i] for i in range(done, total))
    else:
        results = islice(iter(patch_results), done, None)

    for index in range(done, total):
        try:
            result = next(results)
        except StopIteration:
            raise IncompleteInputError(f"patch results ended after {index} of {total}") from None
        _commit(acc, index, result)
    if next(results, None) is not None:
        raise ShapeError(f"more patch results than the {total} placements in the plan")
    if acc.journal.exists():
        shutil.rmtree(acc.journal)
    acc.update_manifest(state="accumulated")
    return finalize(acc, policy, workers)
