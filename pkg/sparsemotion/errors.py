"""Exception types shared across the package.

Validation problems (bad flags, configs, preconditions) derive from
``ValidationError`` so the CLI can map them to exit code 1; everything else
that escapes a command is treated as a runtime failure.
"""


class SparseMotionError(Exception):
    """Base class for all package errors."""

    code = "error"


class ValidationError(SparseMotionError):
    """A precondition, config value or flag is invalid."""

    code = "validation"


class ShapeError(ValidationError):
    """Tensor shapes are incompatible for an operation."""

    code = "shape"

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")
        self.op = op
        self.shapes = shapes


class AlignmentError(ValidationError):
    """Requested motion range maps outside the available audio tokens."""

    code = "alignment"

    def __init__(self, missing_start: int, missing_end: int, available: int):
        super().__init__(
            f"audio tokens [{missing_start}, {missing_end}) are outside the "
            f"stream (available: [0, {available}))"
        )
        self.missing = (missing_start, missing_end)


class CapacityError(ValidationError):
    """A packed sequence does not fit into the configured positions."""

    code = "capacity"

    def __init__(self, span: str, length: int, limit: int):
        super().__init__(
            f"span '{span}' overflows max positions: {length} > {limit}"
        )
        self.span = span


class CheckpointError(ValidationError):
    """Checkpoint contents do not match the requested model or stage."""

    code = "checkpoint"

    def __init__(self, message: str, differing_keys: list[str] | None = None):
        if differing_keys:
            message = f"{message}: {', '.join(sorted(differing_keys))}"
        super().__init__(message)
        self.differing_keys = differing_keys or []


class EndOfStream(Exception):
    """Raised by the streamer when the audio has been fully consumed."""
