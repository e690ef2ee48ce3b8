"""Exception hierarchy shared by the library and the CLI."""


class LenslessError(Exception):
    """Base class for all lenslesskit errors."""


class ConfigError(LenslessError):
    """Invalid configuration or command-line usage (CLI exit code 2)."""


class ShapeError(LenslessError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class DegeneratePSFError(LenslessError, ValueError):
    """The PSF has no positive entry and cannot be normalized."""


class PadOverflowError(LenslessError, ValueError):
    """More PSF entries survive thresholding than the sparse capacity allows."""


class NumericalError(LenslessError, RuntimeError):
    """NaN/Inf encountered in a network output or loss (CLI exit code 3)."""


class GraphBreakError(LenslessError, RuntimeError):
    """A tensor that must carry gradients was detached from the autograd graph."""


class PretrainedWeightsUnavailable(LenslessError, RuntimeError):
    """Pretrained backbone weights could not be loaded and random init was not allowed."""
