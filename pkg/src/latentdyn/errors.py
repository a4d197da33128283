"""Exception types shared across the package."""


class LatentDynError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(LatentDynError, ValueError):
    """An argument violates a documented precondition."""


class SingularMatrixError(LatentDynError):
    """Matrix inverse requested for a (near-)singular matrix."""


class NonFiniteError(LatentDynError, ArithmeticError):
    """A computation produced NaN or Inf; the message names the source."""


class ContractViolationError(LatentDynError):
    """An API was used in a way its contract forbids (e.g. non-scalar root)."""


class SchemaError(LatentDynError, ValueError):
    """Input data violates the expected file schema."""


class EmptyDatasetError(SchemaError):
    """A dataset file parsed to zero individuals."""


class EmptyInputError(LatentDynError, ValueError):
    """An aggregate was requested over an empty collection."""


class NotFoundError(LatentDynError, KeyError):
    """A referenced entity (e.g. individual id) does not exist."""


class UnderdeterminedFitError(LatentDynError):
    """Too few data points to identify the requested fit."""


class DegenerateItemError(LatentDynError):
    """An item has max == min, so it cannot be rescaled."""


class TrainingDivergedError(LatentDynError):
    """Too many non-finite training steps in one epoch."""
