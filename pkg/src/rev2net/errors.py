"""Exception hierarchy shared by every rev2net module."""


class Rev2NetError(Exception):
    """Base class for all library errors."""


class InvalidShapeError(Rev2NetError, ValueError):
    pass


class InvalidAxisError(Rev2NetError, ValueError):
    pass


class NoTapeError(Rev2NetError, RuntimeError):
    """Raised when backward is called on a tensor that was never recorded."""


class InvalidInputError(Rev2NetError, ValueError):
    pass


class ConfigError(Rev2NetError, ValueError):
    """A configuration value violates its invariants.

    ``field`` names the offending key (dotted path) so the CLI can report it.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FormatError(Rev2NetError, ValueError):
    """A binary container failed validation; ``field`` is the header field at fault."""

    def __init__(self, field: str, message: str, path=None):
        where = f" in {path}" if path is not None else ""
        super().__init__(f"bad {field}{where}: {message}")
        self.field = field
        self.path = path


class DataError(Rev2NetError, RuntimeError):
    """Training data is incomplete (e.g. a flow target is missing for a clip)."""
