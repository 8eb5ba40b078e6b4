"""Multi-resolution crop mapping.

A library for mapping a target crop from stacked multi-resolution imagery:
attention U-Net segmentation trained in two phases, MC-dropout probability
maps, stratified area estimation with confidence intervals, and forest-loss
attribution. A synthetic-landscape generator provides desk-scale inputs with
known ground truth for end-to-end verification.
"""

__version__ = "0.1.0"

from .errors import ConfigError, CropmapError, DataError, NumericError
from .raster import RasterGrid, Window, align_check, extract_window, read_raster, resample, write_raster

__all__ = [
    "ConfigError",
    "CropmapError",
    "DataError",
    "NumericError",
    "RasterGrid",
    "Window",
    "align_check",
    "extract_window",
    "read_raster",
    "resample",
    "write_raster",
]
