"""Exception hierarchy shared across the package.

The command line maps these onto exit codes: configuration problems exit
with 2, data/schema problems with 3, numerical failures with 4.
"""


class SplineFAError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SplineFAError):
    """Invalid option values, grids, shapes, or incompatible settings."""


class DataError(SplineFAError):
    """Input data violates the expected schema or value ranges."""


class SchemaError(DataError):
    """Column layout or metadata does not match the declared schema."""


class DomainError(DataError):
    """Values outside the mathematical domain of a transform (e.g. log of
    a nonpositive response time, unit-interval violations)."""


class DegenerateMVError(DataError):
    """A manifest variable carries no information (constant column or
    zero model-implied variance)."""


class NumericalError(SplineFAError):
    """Non-finite intermediate values or failed numerical subroutines."""


class DegeneratePosteriorError(NumericalError):
    """All unnormalized posterior weights vanished for some record."""

    def __init__(self, record_index, message=None):
        self.record_index = record_index
        super().__init__(message or f"degenerate posterior for record {record_index}")


class MonotonicityViolationError(NumericalError):
    """The optimization trace decreased beyond the permitted slack."""


class ConstraintInfeasibleError(NumericalError):
    """A subproblem has no feasible point or lost feasibility."""


class InsufficientEnsembleError(SplineFAError):
    """An operation requires more successful replicates than available."""
