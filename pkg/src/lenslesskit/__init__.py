"""Physics-informed dual-critic reconstruction for multi-PSF lensless imaging."""

__version__ = "0.1.0"
