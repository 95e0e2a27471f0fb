"""Active learning for volumetric segmentation with uncertainty-driven slice sampling."""

__version__ = "0.1.0"
