"""Exception hierarchy shared across the pipeline."""


class WeakMilError(Exception):
    """Base class for all package errors."""


class DimensionError(WeakMilError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(WeakMilError, ArithmeticError):
    """A loss or gradient became non-finite."""


class ConfigurationError(WeakMilError, ValueError):
    """Invalid configuration value, unknown key, or mismatched parameter sets."""


class ContractError(WeakMilError, ValueError):
    """An input violates an operation's documented precondition."""


class DegenerateHistogramError(WeakMilError, ValueError):
    """All histogram mass sits in a single bin; no threshold separates it."""


class DatasetError(WeakMilError, ValueError):
    """The data cannot support the requested operation (e.g. one class only)."""


class EmptyBagError(DatasetError):
    """A slide has no kept patches to build a feature bag from."""


class UndefinedMetricError(WeakMilError, ValueError):
    """A metric is undefined for the given labels."""


class FormatError(WeakMilError, ValueError):
    """A binary file is malformed; ``offset`` is where reading failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DependencyError(WeakMilError, FileNotFoundError):
    """A pipeline stage is missing an upstream artifact."""
