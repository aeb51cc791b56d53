"""Exception types shared across the package.

Every error raised by stam code subclasses StamError so the CLI can map
library failures to its exit-code contract in one place.
"""


class StamError(Exception):
    """Base class for all stam errors."""


class ShapeError(StamError, ValueError):
    """Tensor dimensions do not conform to an operation's contract."""


class ConfigError(StamError, ValueError):
    """Invalid or inconsistent configuration (model dims, variants, files)."""


class LabelError(StamError, ValueError):
    """A class label lies outside the valid range."""


class ContractError(StamError, RuntimeError):
    """API misuse: non-scalar loss, repeated backward, missing gradients."""


class SamplingError(StamError, ValueError):
    """Frame sampling request cannot be satisfied (e.g. F > T)."""


class FormatError(StamError, ValueError):
    """A binary file does not match its on-disk format.

    `offset` is the byte position at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(StamError, ValueError):
    """A checkpoint is malformed or inconsistent with the requested config."""


class SizeError(StamError, MemoryError):
    """A benchmark size did not fit in memory; partial results are attached."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial if partial is not None else []
