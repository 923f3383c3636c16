"""Exception hierarchy. The CLI maps each category to a distinct exit code."""


class SpmError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(SpmError):
    """Invalid configuration: empty signatures, empty concepts, bad pools."""


class ContractViolationError(SpmError):
    """Shape or interface contract broken by a caller."""


class DegenerateInputError(SpmError):
    """Numerically degenerate input, e.g. a zero-norm concept encoding."""


class CompatibilityError(SpmError):
    """Membrane and model signatures do not match."""


class TrainingError(SpmError):
    """Training diverged or could not proceed."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class RegistryError(SpmError):
    """Base class for membrane-file persistence errors."""


class ChecksumError(RegistryError):
    """Stored payload does not match its content checksum."""


class VersionError(RegistryError):
    """Membrane file declares an unsupported format version."""


class TruncatedPayloadError(RegistryError):
    """Membrane file is cut short or missing payload entries."""


class TestbedError(SpmError):
    """Toy testbed missing, malformed, or failed to converge."""
