"""Exception hierarchy shared by all modules."""


class ShotError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ParameterError(ShotError, ValueError):
    """A scalar parameter lies outside its admissible range."""

    exit_code = 2


class GeometryError(ShotError, ValueError):
    """Invalid mesh or domain geometry."""

    exit_code = 3


class MeshLoadError(GeometryError):
    """A mesh file could not be parsed or failed validation."""


class OutOfDomainError(GeometryError):
    """A site lies outside the triangulated hull."""

    def __init__(self, index, point):
        self.index = index
        self.point = tuple(point)
        super().__init__(f"site {index} at {self.point} lies outside the mesh hull")


class CoverageError(ShotError, ValueError):
    """A site is not covered by any compactly supported basis function."""

    exit_code = 3

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"site {index} is not covered by any basis function")


class EmptyCandidateError(ShotError, ValueError):
    exit_code = 3


class SizeError(ShotError, ValueError):
    exit_code = 3


class UndefinedEstimateError(ShotError, ValueError):
    """An empirical dependence estimate has no exceedances to work with."""

    exit_code = 3


class DataError(ShotError, ValueError):
    exit_code = 3


class PreprocessingError(DataError):
    pass


class NumericError(ShotError, ArithmeticError):
    """Factorization failure or a non-finite log posterior."""

    exit_code = 4
