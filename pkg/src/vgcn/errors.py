"""Exception hierarchy shared across the package."""


class VgcnError(Exception):
    """Base class for all errors raised by vgcn."""


class ShapeError(VgcnError, ValueError):
    pass


class ConfigError(VgcnError, ValueError):
    pass


class ContractError(VgcnError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class StateError(VgcnError, RuntimeError):
    pass


class DataError(VgcnError, ValueError):
    pass


class SchemaError(DataError):
    """Malformed dataset file; ``path`` points at the offending JSON field."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class ValidationError(DataError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class UnsupportedModelError(VgcnError, TypeError):
    pass


class CompatibilityError(VgcnError, ValueError):
    """Two architectures (or a checkpoint and an architecture) do not line up."""

    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message)
        self.parameter = parameter


class CheckpointError(VgcnError, ValueError):
    pass


class MalformedFileError(CheckpointError):
    pass


class VersionError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found!r} is not supported (expected {expected!r})")
        self.found = found
        self.expected = expected
