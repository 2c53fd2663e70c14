"""Exception hierarchy shared by the library and the command line."""


class GpSpectrumError(Exception):
    """Base class for all errors raised by this package."""


class FactorizationFailure(GpSpectrumError, ArithmeticError):
    """Covariance matrix is not numerically positive definite, even with jitter."""


class DegenerateData(GpSpectrumError, ValueError):
    """Voxel data carry no usable information (too few points or constant)."""


class OptimizerStall(GpSpectrumError):
    """Line search could not make progress before convergence."""


class DatasetError(GpSpectrumError, ValueError):
    """A dataset violates its structural invariants."""


class MaskMismatch(GpSpectrumError, ValueError):
    """Two volumes or models do not share a lattice and mask."""


class SubjectMismatch(GpSpectrumError, ValueError):
    """Two cross-validation reports do not cover the same subjects."""


class UncoveredScore(GpSpectrumError, ValueError):
    """A score falls outside every segment of a binning rule."""


class ZeroVariance(GpSpectrumError, ValueError):
    """Series cannot be standardized because its variance is zero."""


class FormatError(GpSpectrumError):
    """A binary volume/field file is malformed.

    ``offset`` is the first byte offset at which the file departs from the
    expected layout.
    """

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class ConfigError(GpSpectrumError, ValueError):
    """A run configuration file could not be parsed."""
