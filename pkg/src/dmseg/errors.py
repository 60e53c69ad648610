"""Exception types raised across the dmseg pipeline."""


class DmsegError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(DmsegError):
    """A file could not be parsed; carries the offending location when known."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)


class MissingValue(DmsegError):
    """A required cell or column contains an empty or NaN value."""


class OutOfRange(DmsegError):
    """A value lies outside its documented domain (e.g. beta not in (0,1))."""


class DuplicateId(DmsegError):
    """A probe or sample identifier occurs more than once."""


class DuplicatePosition(DmsegError):
    """Two probes share the same (chromosome, position) coordinate."""


class NonPositivePosition(DmsegError):
    """A manifest position is zero or negative."""


class MissingColumn(DmsegError):
    """A named column is absent from an input table."""


class NonBinaryGroup(DmsegError):
    """The group column does not have exactly two distinct values."""


class SingletonGroup(DmsegError):
    """One of the two groups has fewer than two samples."""


class UnknownLabel(DmsegError):
    """A requested group label is not present in the group column."""


class ConstantColumn(DmsegError):
    """A covariate column is constant across samples."""


class UnknownProbe(DmsegError):
    """A matrix row identifier is absent from the manifest."""


class MissingSample(DmsegError):
    """A phenotype sample is absent from the methylation matrix."""


class UnknownSample(DmsegError):
    """A matrix column identifier is absent from the phenotype table."""


class TooFewSamples(DmsegError):
    """Not enough samples for the requested computation."""


class RankDeficient(DmsegError):
    """The design matrix does not have full column rank."""


class ScaleMismatch(DmsegError):
    """An operation requiring M-values was called on beta-scale data."""


class NonPositiveVariance(DmsegError):
    """A variance passed to segment scoring is zero or negative."""


class EmptyPool(DmsegError):
    """A null pool holds no draws for the requested stratum."""


class InvalidPlan(DmsegError):
    """A permutation plan request is invalid (e.g. B < 1)."""


class UnknownSegment(DmsegError):
    """A requested segment identifier does not exist in the results."""


class ConfigError(DmsegError):
    """Invalid run configuration (bad flag value, missing input, ...)."""
