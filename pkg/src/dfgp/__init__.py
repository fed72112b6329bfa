"""Gap filling of land-surface rasters with deep-feature Gaussian processes."""

__version__ = "0.1.0"
