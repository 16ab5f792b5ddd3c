"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError and usage problems exit 2,
everything else that escapes exits 1.
"""


class CrossFusionError(Exception):
    """Base class for all package errors."""


class DimensionError(CrossFusionError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(CrossFusionError):
    """A configuration value violates a structural constraint."""


class ContractError(CrossFusionError):
    """A caller broke an API precondition."""


class InputError(CrossFusionError):
    """Input data is structurally invalid (empty scale, bad width, ...)."""


class FormatError(CrossFusionError):
    """A binary container is malformed; carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(CrossFusionError):
    """A manifest line failed to parse; carries the line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class MetricUndefinedError(CrossFusionError):
    """A statistic is undefined for the given cohort (no comparable pairs, no events)."""


class TrainingDiverged(CrossFusionError):
    """Loss became non-finite during optimization."""
