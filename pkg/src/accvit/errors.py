"""Exception types raised across the package."""


class AccVitError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(AccVitError, ValueError):
    pass


class InvalidGroups(AccVitError, ValueError):
    pass


class NotScalar(AccVitError, ValueError):
    pass


class DetachedTensor(AccVitError, RuntimeError):
    pass


class IndivisibleDims(AccVitError, ValueError):
    pass


class InconsistentMetadata(AccVitError, ValueError):
    pass


class BranchCountMismatch(AccVitError, ValueError):
    pass


class OddInput(AccVitError, ValueError):
    pass


class InvalidConfig(AccVitError, ValueError):
    pass


class UnknownVariant(AccVitError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class BadMagic(AccVitError, ValueError):
    pass


class VersionMismatch(AccVitError, ValueError):
    pass


class TruncatedFile(AccVitError, ValueError):
    pass


class BadImage(AccVitError, ValueError):
    pass


class NonFiniteValue(AccVitError, FloatingPointError):
    """Raised in debug mode when an op produces NaN/Inf from finite inputs."""
