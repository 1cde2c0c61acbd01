"""Window placement and weighting.

Everything here is pure arithmetic on shapes: no tensor values are touched.
A :class:`PatchPlan` fixes the order in which windows are visited, and that
order is the contract every other module relies on to map a patch index back
to its spatial region.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache
from numbers import Integral
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import FormatError, InvalidSpecError

PLAN_FORMAT = "tessellate-plan/1"

IntOrSeq = Union[int, Sequence[int]]


def _as_tuple(value: IntOrSeq, rank: int, name: str) -> tuple[int, ...]:
    if isinstance(value, Integral):
        return (int(value),) * rank
    out = tuple(int(v) for v in value)
    if len(out) != rank:
        raise InvalidSpecError(f"{name} has {len(out)} axes, expected {rank}")
    return out


@dataclass(frozen=True)
class TensorLayout:
    """Shape of an ``(N, C, [Z,] Y, X)`` tensor."""

    items: int
    channels: int
    spatial: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "spatial", tuple(int(s) for s in self.spatial))
        if len(self.spatial) not in (2, 3):
            raise InvalidSpecError(f"spatial rank must be 2 or 3, got {len(self.spatial)}")
        if self.items < 1 or self.channels < 1 or min(self.spatial) < 1:
            raise InvalidSpecError(f"all extents must be >= 1, got {self.shape}")

    @classmethod
    def from_shape(cls, shape: Sequence[int]) -> "TensorLayout":
        shape = tuple(int(s) for s in shape)
        if len(shape) not in (4, 5):
            raise InvalidSpecError(f"expected a 4D or 5D shape (N, C, [Z,] Y, X), got {shape}")
        return cls(shape[0], shape[1], shape[2:])

    @property
    def rank(self) -> int:
        return len(self.spatial)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.items, self.channels, *self.spatial)

    def with_channels(self, channels: int) -> "TensorLayout":
        return TensorLayout(self.items, channels, self.spatial)


@dataclass(frozen=True)
class WindowSpec:
    """Per-axis window geometry.

    Parameters
    ----------
    window : sequence of int
        Window length per spatial axis, slowest axis first.
    step : int or sequence of int
        Stride between consecutive window starts. A scalar is broadcast.
    border : int or sequence of int
        Width of the down-weighted shell near each window face.
    border_weight : float
        Stitching weight of border voxels, in ``[0, 1]``.

    Notes
    -----
    With ``border_weight == 0`` only window interiors carry weight, so the
    interiors of neighbouring windows must touch: ``step <= window - 2*border``
    is enforced in that case.
    """

    window: tuple[int, ...]
    step: tuple[int, ...]
    border: tuple[int, ...] = 0
    border_weight: float = 1.0

    def __post_init__(self):
        if isinstance(self.window, Integral):
            raise InvalidSpecError("window must be a per-axis sequence; use WindowSpec.uniform")
        window = tuple(int(w) for w in self.window)
        rank = len(window)
        object.__setattr__(self, "window", window)
        object.__setattr__(self, "step", _as_tuple(self.step, rank, "step"))
        object.__setattr__(self, "border", _as_tuple(self.border, rank, "border"))
        object.__setattr__(self, "border_weight", float(self.border_weight))
        self._validate()

    @classmethod
    def uniform(cls, rank: int, window: int, step: int, border: int = 0, border_weight: float = 1.0):
        return cls((window,) * rank, step, border, border_weight)

    @property
    def rank(self) -> int:
        return len(self.window)

    def _validate(self):
        if self.rank not in (2, 3):
            raise InvalidSpecError(f"spatial rank must be 2 or 3, got {self.rank}")
        for axis, (w, s, b) in enumerate(zip(self.window, self.step, self.border)):
            if w < 1:
                raise InvalidSpecError(f"axis {axis}: window must be >= 1, got {w}")
            if not 1 <= s <= w:
                raise InvalidSpecError(f"axis {axis}: step must satisfy 1 <= step <= window ({w}), got {s}")
            if b < 0 or 2 * b >= w:
                raise InvalidSpecError(f"axis {axis}: border must satisfy 0 <= 2*border < window ({w}), got {b}")
            if self.border_weight == 0 and s > w - 2 * b:
                raise InvalidSpecError(
                    f"axis {axis}: with border_weight 0 the step ({s}) must not exceed "
                    f"window - 2*border ({w - 2 * b}), otherwise voxels between interiors get no weight"
                )
        if not 0.0 <= self.border_weight <= 1.0:
            raise InvalidSpecError(f"border_weight must lie in [0, 1], got {self.border_weight}")

    def check_layout(self, layout: TensorLayout):
        """Raise :class:`InvalidSpecError` if the windows do not fit ``layout``."""
        if layout.rank != self.rank:
            raise InvalidSpecError(f"spec has {self.rank} spatial axes, tensor has {layout.rank}")
        for axis, (w, extent) in enumerate(zip(self.window, layout.spatial)):
            if w > extent:
                raise InvalidSpecError(f"axis {axis}: window {w} exceeds extent {extent}")

    def to_dict(self) -> dict:
        return {
            "window": list(self.window),
            "step": list(self.step),
            "border": list(self.border),
            "border_weight": self.border_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WindowSpec":
        return cls(d["window"], d["step"], d.get("border", 0), d.get("border_weight", 1.0))


@dataclass(frozen=True)
class Placement:
    """One window position: the item it reads from and its per-axis starts."""

    item: int
    start: tuple[int, ...]
    touches_low: tuple[bool, ...]
    touches_high: tuple[bool, ...]

    def region(self, spec: WindowSpec) -> tuple[tuple[int, int], ...]:
        return tuple((s, s + w) for s, w in zip(self.start, spec.window))

    def slices(self, spec: WindowSpec) -> tuple[slice, ...]:
        return tuple(slice(s, s + w) for s, w in zip(self.start, spec.window))


def _make_placement(item: int, start: tuple[int, ...], layout: TensorLayout, spec: WindowSpec) -> Placement:
    high = tuple(e - w for e, w in zip(layout.spatial, spec.window))
    for axis, (s, h) in enumerate(zip(start, high)):
        if not 0 <= s <= h:
            raise InvalidSpecError(f"axis {axis}: start {s} outside [0, {h}]")
    return Placement(
        item=item,
        start=start,
        touches_low=tuple(s == 0 for s in start),
        touches_high=tuple(s == h for s, h in zip(start, high)),
    )


@dataclass(frozen=True)
class PatchPlan:
    """Ordered window placements for one tensor layout and window spec.

    Placements are ordered item-major, then by the slowest spatial axis
    first. Patch ``i`` of any stack built from this plan corresponds to
    ``plan.placements[i]``.
    """

    layout: TensorLayout
    spec: WindowSpec
    placements: tuple[Placement, ...] = field(repr=False)

    def __len__(self) -> int:
        return len(self.placements)

    def __iter__(self) -> Iterator[Placement]:
        return iter(self.placements)

    def __getitem__(self, index: int) -> Placement:
        return self.placements[index]

    @property
    def axis_counts(self) -> tuple[int, ...]:
        return tuple(
            len(axis_positions(e, w, s))
            for e, w, s in zip(self.layout.spatial, self.spec.window, self.spec.step)
        )

    def same_geometry(self, other: "PatchPlan") -> bool:
        """True when both plans visit identical regions, ignoring channel counts."""
        return (
            self.layout.items == other.layout.items
            and self.layout.spatial == other.layout.spatial
            and self.spec == other.spec
            and self.placements == other.placements
        )

    def subset(self, indices) -> "PatchPlan":
        """Plan restricted to ``indices`` (in the order given)."""
        return PatchPlan(self.layout, self.spec, tuple(self.placements[i] for i in indices))

    def to_dict(self) -> dict:
        return {
            "format": PLAN_FORMAT,
            "layout": {
                "items": self.layout.items,
                "channels": self.layout.channels,
                "spatial": list(self.layout.spatial),
            },
            "spec": self.spec.to_dict(),
            "placements": [[p.item, *p.start] for p in self.placements],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchPlan":
        if d.get("format") != PLAN_FORMAT:
            raise FormatError(f"not a {PLAN_FORMAT} document (format={d.get('format')!r})")
        lay = d["layout"]
        layout = TensorLayout(lay["items"], lay["channels"], tuple(lay["spatial"]))
        spec = WindowSpec.from_dict(d["spec"])
        spec.check_layout(layout)
        placements = []
        for row in d["placements"]:
            item, *start = (int(v) for v in row)
            if not 0 <= item < layout.items or len(start) != layout.rank:
                raise FormatError(f"bad placement entry {row}")
            placements.append(_make_placement(item, tuple(start), layout, spec))
        return cls(layout, spec, tuple(placements))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PatchPlan":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)


def axis_positions(extent: int, window: int, step: int) -> list[int]:
    """Window starts along one axis, with the last window pulled back to the edge.

    >>> axis_positions(236, 64, 32)
    [0, 32, 64, 96, 128, 160, 172]
    """
    if step < 1:
        raise InvalidSpecError(f"step must be >= 1, got {step}")
    if window < 1 or window > extent:
        raise InvalidSpecError(f"window {window} must lie in [1, extent={extent}]")
    if step > window:
        raise InvalidSpecError(f"step {step} exceeds window {window}")
    last = extent - window
    positions = list(range(0, last + 1, step))
    if positions[-1] != last:
        positions.append(last)
    return positions


def build_plan(layout: TensorLayout, spec: WindowSpec) -> PatchPlan:
    """Enumerate every window placement for ``layout`` under ``spec``."""
    spec.check_layout(layout)
    per_axis = [
        axis_positions(e, w, s) for e, w, s in zip(layout.spatial, spec.window, spec.step)
    ]
    placements = tuple(
        _make_placement(item, start, layout, spec)
        for item in range(layout.items)
        for start in itertools.product(*per_axis)
    )
    return PatchPlan(layout, spec, placements)


@lru_cache(maxsize=256)
def _weights(spec: WindowSpec, touches_low: tuple[bool, ...], touches_high: tuple[bool, ...]) -> np.ndarray:
    bw = np.float32(spec.border_weight)
    profiles = []
    for w, b, lo, hi in zip(spec.window, spec.border, touches_low, touches_high):
        prof = np.ones(w, dtype=np.float32)
        if b:
            # faces on the global boundary have no neighbour to defer to
            if not lo:
                prof[:b] = bw
            if not hi:
                prof[w - b:] = bw
        profiles.append(prof)
    out = profiles[0]
    for prof in profiles[1:]:
        out = np.minimum.outer(out, prof)
    out = np.ascontiguousarray(out, dtype=np.float32)
    out.setflags(write=False)
    return out


def weight_map(spec: WindowSpec, placement: Placement) -> np.ndarray:
    """Per-voxel stitching weight for one placement.

    Voxels within ``border`` of a window face get ``border_weight``; all
    others get 1. Faces lying on the tensor boundary are treated as interior.
    The returned array is read-only and may be shared between calls.
    """
    if len(placement.start) != spec.rank:
        raise InvalidSpecError("placement rank does not match spec")
    return _weights(spec, tuple(placement.touches_low), tuple(placement.touches_high))
