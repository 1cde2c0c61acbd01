"""Cut dense tensors into window stacks following a :class:`PatchPlan`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import store
from .errors import ShapeError
from .geometry import PatchPlan, TensorLayout

PLAN_ATTR = "tessellate_plan"


@dataclass
class PatchStack:
    """Patches of shape ``(M, C, *window)``; patch ``i`` belongs to ``plan[i]``."""

    plan: PatchPlan
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 + self.plan.spec.rank or v.shape[0] != len(self.plan) or v.shape[2:] != self.plan.spec.window:
            raise ShapeError(
                f"patch values have shape {v.shape}, expected ({len(self.plan)}, C, *{self.plan.spec.window})"
            )

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def window(self) -> tuple[int, ...]:
        return self.plan.spec.window


def _layout_of(tensor) -> TensorLayout:
    return TensorLayout.from_shape(tensor.shape)


def iter_patches(tensor, plan: PatchPlan, channels: int | None = None) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(index, patch)`` in plan order, one ``(C, *window)`` patch at a time.

    ``tensor`` may be anything with a ``shape`` that supports basic slicing:
    a numpy array, a ``np.memmap`` or a :class:`~tessellate.store.ChunkedArray`.
    Only one patch is resident at a time.
    """
    layout = _layout_of(tensor)
    if layout.items != plan.layout.items or layout.spatial != plan.layout.spatial:
        raise ShapeError(f"tensor shape {tensor.shape} does not match plan layout {plan.layout.shape}")
    if channels is not None and layout.channels != channels:
        raise ShapeError(f"tensor has {layout.channels} channels, expected {channels}")
    spec = plan.spec
    for i, p in enumerate(plan.placements):
        patch = tensor[(p.item, slice(None), *p.slices(spec))]
        yield i, np.asarray(patch, dtype=np.float32)


def extract(tensor, plan: PatchPlan) -> PatchStack:
    """Materialize every window of ``tensor`` as one stack.

    Parameters
    ----------
    tensor : array_like
        Shape ``(N, C, [Z,] Y, X)``; must equal ``plan.layout``.
    plan : PatchPlan

    Returns
    -------
    PatchStack
        ``values`` has shape ``(len(plan), C, *window)``, float32.
    """
    if tuple(tensor.shape) != plan.layout.shape:
        raise ShapeError(f"tensor shape {tuple(tensor.shape)} != plan layout {plan.layout.shape}")
    out = np.empty((len(plan), plan.layout.channels, *plan.spec.window), dtype=np.float32)
    for i, patch in iter_patches(tensor, plan):
        out[i] = patch
    return PatchStack(plan, out)


def extract_pair(data, labels, plan: PatchPlan) -> tuple[PatchStack, PatchStack]:
    """Extract aligned data and label stacks; channel counts may differ."""
    if tuple(data.shape) != plan.layout.shape:
        raise ShapeError(f"data shape {tuple(data.shape)} != plan layout {plan.layout.shape}")
    lay = _layout_of(labels)
    if lay.items != plan.layout.items or lay.spatial != plan.layout.spatial:
        raise ShapeError(f"labels shape {tuple(labels.shape)} does not match data shape {tuple(data.shape)}")
    label_plan = PatchPlan(lay, plan.spec, plan.placements)
    return extract(data, plan), extract(labels, label_plan)


def patch_region(plan: PatchPlan, index: int) -> tuple[int, tuple[tuple[int, int], ...]]:
    """Item and half-open ``(start, stop)`` spatial intervals of patch ``index``."""
    if not 0 <= index < len(plan):
        raise IndexError(f"patch index {index} out of range for plan with {len(plan)} placements")
    p = plan.placements[index]
    return p.item, p.region(plan.spec)


def create_stack_store(root, plan: PatchPlan, count: int, channels: int, fill_value: float = 0.0) -> store.ChunkedArray:
    """Create an on-disk patch store, one chunk per patch, recording ``plan``."""
    meta = store.ArrayMetadata(
        shape=(count, channels, *plan.spec.window),
        chunks=(1, channels, *plan.spec.window),
        fill_value=fill_value,
    )
    return store.create(root, meta, attrs={PLAN_ATTR: plan.to_dict()})


def save_stack(stack: PatchStack, root) -> store.ChunkedArray:
    arr = create_stack_store(root, stack.plan, len(stack), stack.channels)
    for i in range(len(stack)):
        arr.write_chunk((i, 0) + (0,) * stack.plan.spec.rank, stack.values[i:i + 1])
    return arr


def load_stack(root) -> PatchStack:
    arr = store.open_array(root)
    plan = PatchPlan.from_dict(arr.attrs[PLAN_ATTR])
    return PatchStack(plan, arr.read())
