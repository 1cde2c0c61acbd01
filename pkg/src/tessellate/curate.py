"""Training-set cleaning for sparsely annotated volumes.

Labels are float32 tensors holding integer class codes, with a sentinel
value (``-1`` by default) meaning "no annotation here".
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from numbers import Integral
from typing import Sequence

import numpy as np

from .errors import InvalidSpecError, ShapeError, UndefinedStatisticError
from .geometry import PatchPlan, TensorLayout
from .subsample import PatchStack

REPORT_FORMAT = "tessellate-report/1"


@dataclass(frozen=True)
class LabelConvention:
    unlabeled_sentinel: float = -1.0

    def __post_init__(self):
        v = float(self.unlabeled_sentinel)
        if float(np.float32(v)) != v:
            raise InvalidSpecError(f"sentinel {v} is not exactly representable as float32")
        object.__setattr__(self, "unlabeled_sentinel", v)

    def labeled(self, values: np.ndarray) -> np.ndarray:
        """Boolean mask of annotated voxels."""
        return values != np.float32(self.unlabeled_sentinel)


@dataclass
class CurationReport:
    total_patches: int
    retained_patches: int
    retained_indices: list[int] = field(default_factory=list)
    annotated_voxels_unique: int = 0
    annotated_voxels_in_retained: int = 0
    duplication_rate: float | None = None

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "CurationReport":
        d = dict(d)
        if d.pop("format", None) != REPORT_FORMAT:
            raise ValueError(f"not a {REPORT_FORMAT} document")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _border_tuple(border, rank: int) -> tuple[int, ...]:
    if isinstance(border, Integral):
        return (int(border),) * rank
    border = tuple(int(b) for b in border)
    if len(border) != rank:
        raise InvalidSpecError(f"border has {len(border)} axes, expected {rank}")
    return border


def border_mask(window: Sequence[int], border) -> np.ndarray:
    """Boolean array of window shape, True within ``border`` of any face."""
    border = _border_tuple(border, len(window))
    for axis, (w, b) in enumerate(zip(window, border)):
        if b < 0 or 2 * b >= w:
            raise InvalidSpecError(f"axis {axis}: border must satisfy 0 <= 2*border < window ({w}), got {b}")
    inner = np.zeros(tuple(window), dtype=bool)
    inner[tuple(slice(b, w - b) for w, b in zip(window, border))] = True
    return ~inner


def mask_border(labels: PatchStack, border, convention: LabelConvention = LabelConvention()) -> PatchStack:
    """Return a copy of ``labels`` with the outer shell of every patch set to the sentinel.

    A voxel on one patch's edge is usually interior to an overlapping patch,
    so it still contributes to training from there.
    """
    shell = border_mask(labels.window, border)
    values = labels.values.copy()
    values[:, :, shell] = np.float32(convention.unlabeled_sentinel)
    return PatchStack(labels.plan, values)


def _check_paired(data: PatchStack, labels: PatchStack):
    if len(data) != len(labels) or not data.plan.same_geometry(labels.plan):
        raise ShapeError("data and label stacks are not paired (different plans or patch counts)")


def filter_unlabeled(
    data: PatchStack, labels: PatchStack, convention: LabelConvention = LabelConvention()
) -> tuple[PatchStack, PatchStack, CurationReport]:
    """Drop patch pairs whose label patch carries no annotation at all.

    Returns the retained data and label stacks (relative order preserved,
    each with the correspondingly restricted plan) and a report. The report's
    voxel counts are taken over the label patches as given, so after
    :func:`mask_border` they count only interior annotations.
    """
    _check_paired(data, labels)
    flat = convention.labeled(labels.values).any(axis=1).reshape(len(labels), -1)
    per_patch = flat.sum(axis=1)
    keep = np.flatnonzero(per_patch > 0)

    report = CurationReport(
        total_patches=len(labels),
        retained_patches=int(keep.size),
        retained_indices=[int(i) for i in keep],
        annotated_voxels_in_retained=int(per_patch[keep].sum()),
    )
    if keep.size:
        report.annotated_voxels_unique = _unique_covered(labels, keep, convention)
        report.duplication_rate = report.annotated_voxels_in_retained / report.annotated_voxels_unique
    idx = keep.tolist()
    return (
        PatchStack(data.plan.subset(idx), data.values[keep]),
        PatchStack(labels.plan.subset(idx), labels.values[keep]),
        report,
    )


def _unique_covered(labels: PatchStack, keep: np.ndarray, convention: LabelConvention) -> int:
    # scatter annotated patch voxels back to volume coordinates and count distinct ones
    layout = labels.plan.layout
    seen = np.zeros((layout.items, *layout.spatial), dtype=bool)
    spec = labels.plan.spec
    for i in keep:
        p = labels.plan.placements[i]
        hit = convention.labeled(labels.values[i]).any(axis=0)
        view = seen[(p.item, *p.slices(spec))]
        view |= hit
    return int(seen.sum())


def duplication_rate(
    plan: PatchPlan,
    labels,
    retained: Sequence[int],
    convention: LabelConvention = LabelConvention(),
    slab: int = 16,
) -> float:
    """Annotated-voxel occurrences across retained windows per unique annotated voxel.

    The denominator counts only annotated voxels inside at least one
    retained window, so the rate is exactly 1 when windows do not overlap.
    A voxel is annotated if any of its label channels differs from the
    sentinel.

    ``labels`` may be any array-like supporting basic slicing (including a
    memory map or a :class:`~tessellate.store.ChunkedArray`); it is read
    one window or one slab at a time.

    Raises
    ------
    UndefinedStatisticError
        If the retained windows contain no annotated voxel.
    """
    lay = TensorLayout.from_shape(labels.shape)
    if lay.items != plan.layout.items or lay.spatial != plan.layout.spatial:
        raise ShapeError(f"labels shape {tuple(labels.shape)} does not match plan layout {plan.layout.shape}")
    retained = sorted(set(int(i) for i in retained))
    if retained and not (0 <= retained[0] and retained[-1] < len(plan)):
        raise IndexError("retained index out of range")
    spec = plan.spec

    occurrences = 0
    covered = np.zeros((lay.items, *lay.spatial), dtype=bool)
    for i in retained:
        p = plan.placements[i]
        sl = p.slices(spec)
        window = np.asarray(labels[(p.item, slice(None), *sl)])
        occurrences += int(convention.labeled(window).any(axis=0).sum())
        covered[(p.item, *sl)] = True

    unique = 0
    depth = lay.spatial[0]
    for item in range(lay.items):
        for lo in range(0, depth, slab):
            hi = min(depth, lo + slab)
            mask = covered[item, lo:hi]
            if not mask.any():
                continue
            block = np.asarray(labels[item, :, lo:hi])
            unique += int((convention.labeled(block).any(axis=0) & mask).sum())
    if unique == 0:
        raise UndefinedStatisticError("no annotated voxels inside the retained windows")
    return occurrences / unique
