"""Overlapping-window tiling, curation and stitching for large 2D/3D tensors."""

from .curate import CurationReport, LabelConvention, duplication_rate, filter_unlabeled, mask_border
from .errors import (
    AlreadyExistsError,
    CoverageError,
    FormatError,
    IncompleteInputError,
    InvalidSpecError,
    ShapeError,
    TessellateError,
    UndefinedStatisticError,
    UnrecognizedArtifactError,
)
from .geometry import PatchPlan, Placement, TensorLayout, WindowSpec, axis_positions, build_plan, weight_map
from .stitch import (
    Accumulators,
    StitchPolicy,
    accumulate,
    create_accumulators,
    finalize,
    open_accumulators,
    stitch_stream,
)
from .store import ArrayMetadata, ChunkedArray, chunk_key, open_array
from .subsample import PatchStack, extract, extract_pair, iter_patches, patch_region

__version__ = "0.1.0"
