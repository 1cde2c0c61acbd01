"""Exception types shared across tessellate."""


class TessellateError(Exception):
    """Base class for all tessellate errors."""


class InvalidSpecError(TessellateError, ValueError):
    """A window/step/border configuration is inconsistent or out of range."""


class ShapeError(TessellateError, ValueError):
    """Array shapes or layouts do not match what an operation requires."""


class FormatError(TessellateError):
    """An on-disk artifact is malformed or uses an unsupported encoding."""


class UnrecognizedArtifactError(FormatError):
    """A path holds nothing tessellate knows how to read."""


class AlreadyExistsError(TessellateError, FileExistsError):
    """Refusing to overwrite an existing store or artifact."""


class CoverageError(TessellateError):
    """Output voxels received zero total weight during stitching."""

    def __init__(self, count: int):
        super().__init__(f"{count} output voxel(s) have zero accumulated weight")
        self.count = count


class IncompleteInputError(TessellateError):
    """A patch-result sequence ended before every placement was supplied."""


class UndefinedStatisticError(TessellateError, ValueError):
    """A statistic was requested on data for which it is not defined."""
