"""Exception types raised across the package.

Every error that can surface through the public API derives from
:class:`LdmlError`, so callers (and the CLI) can catch one base class and
report a stable ``code`` string.
"""


class LdmlError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# -- data / ingestion ---------------------------------------------------------

class MissingColumn(LdmlError):
    pass


class NonBinaryTreatment(LdmlError):
    pass


class NonFiniteValue(LdmlError):
    pass


class EmptyFile(LdmlError):
    pass


class InvalidKPrime(LdmlError):
    pass


class TooFewRows(LdmlError):
    pass


class MissingInstrument(LdmlError):
    pass


# -- learners -----------------------------------------------------------------

class EmptyTrainingSet(LdmlError):
    pass


class SingularDesign(LdmlError):
    pass


class NonBinaryLabels(LdmlError):
    pass


class DimensionMismatch(LdmlError):
    pass


# -- engine -------------------------------------------------------------------

class DegenerateTreatmentArm(LdmlError):
    pass


class KPrimeTooSmall(LdmlError):
    pass


class EmptySubsample(LdmlError):
    pass


class EmptyPoints(LdmlError):
    pass


class SolverNoCandidate(LdmlError):
    pass


# -- inference ----------------------------------------------------------------

class NoContributingRows(LdmlError):
    pass


class NonPositiveBandwidth(LdmlError):
    pass


class SingularJacobian(LdmlError):
    pass


class FoldPlanMismatch(LdmlError):
    pass


class NuTooSmall(LdmlError):
    pass


# -- cli / study --------------------------------------------------------------

class ConfigError(LdmlError):
    pass


class UnknownMethod(LdmlError):
    pass


class ZeroReps(LdmlError):
    pass
