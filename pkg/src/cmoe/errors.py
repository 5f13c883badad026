"""Exception and warning types shared across the package."""


class CmoeError(Exception):
    """Base class for all cmoe errors."""


class SingularMatrix(CmoeError):
    """A pivot fell below tolerance while factorizing a square system."""


class ShapeMismatch(CmoeError):
    """Two arrays that must share a shape do not."""


class DimensionMismatch(CmoeError):
    """An input vector does not match the model's feature dimension."""


class LengthMismatch(CmoeError):
    """Paired vectors of unequal length."""


class IndexOutOfRange(CmoeError):
    """A sample index referenced outside the available range."""


class DegenerateSample(CmoeError):
    """A sample has zero possibility under every context."""


class AllZeroWeights(CmoeError):
    """An expert update was requested with no effective sample weight."""


class ZeroVariance(CmoeError):
    """A statistic is undefined because the reference values are constant."""


class ZeroVarianceFeature(CmoeError):
    """A feature is constant on the training data and cannot be scaled."""


class StateError(CmoeError):
    """An operation was applied to data in the wrong scaling state."""


class MissingColumn(CmoeError):
    """A required column is absent from the input file."""


class NonNumericCell(CmoeError):
    """A feature cell could not be parsed as a number."""


class DelayTooLarge(CmoeError):
    """A lag delay equals or exceeds the number of samples."""


class SingleBatch(CmoeError):
    """Leave-one-batch-out requires at least two batches."""


class FormatVersionMismatch(CmoeError):
    """A model file has an unknown version or is structurally invalid."""


class NoFeasiblePoint(CmoeError):
    """No grid point satisfied the consistency constraint.

    Carries the full diagnostics table so callers can still report it.
    """

    def __init__(self, message, table=None):
        super().__init__(message)
        self.table = table


class ConfigError(CmoeError):
    """A run configuration file is invalid."""


class LeverageWarning(UserWarning):
    """A leave-one-out term was skipped because its leverage reached one."""


class NonConvergenceWarning(UserWarning):
    """An inner solver hit its cycle cap before meeting tolerance."""


class ContextNormalizationWarning(UserWarning):
    """A possibility row never reaches 1 on the available samples."""
