"""Exception hierarchy shared by all pipeline stages.

The CLI maps these onto exit codes: usage errors exit 2, data and format
errors exit 3, numerical failures exit 4.
"""


class MsmilError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class UsageError(MsmilError):
    """Bad flags, unknown config keys, malformed invocations."""

    exit_code = 2


class DataError(MsmilError):
    """Invalid numeric input (non-finite values, bad shapes of user data)."""


class DimensionError(DataError):
    """A vector or raster does not have the contracted dimensions."""


class GeometryError(DataError):
    """A patch region falls outside the slide bounds."""


class SizeError(DataError):
    """Too few samples for the requested operation."""


class TissueScarcityError(DataError):
    """Rejection sampling exhausted its attempt budget on one slide."""

    def __init__(self, slide_id: str, attempts: int):
        super().__init__(
            f"slide {slide_id!r}: no tissue patch found after "
            f"{attempts} consecutive rejections"
        )
        self.slide_id = slide_id
        self.attempts = attempts


class FormatError(DataError):
    """A binary or text artifact fails format validation."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ModelShapeError(DataError):
    """A model file's input/output arity does not match the contract."""


class BackendError(MsmilError):
    """Feature backend inference failed."""


class DegenerateLabelsError(DataError):
    """Training data contains a single class."""


class NumericalError(MsmilError):
    """Solver failed to converge or produced non-finite results."""

    exit_code = 4
