"""Georeferenced grid types, window arithmetic, alignment checks, and file I/O.

Coordinates follow the common north-up raster convention: (origin_x, origin_y)
is the outer corner of pixel (0, 0), x grows with columns, y shrinks with rows.
All module-internal computation is pixel-space; geographic coordinates appear
only here and at I/O boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geotiff
from .errors import DataError

_REL_TOL = 1e-9


@dataclass(frozen=True)
class Window:
    """A rectangular pixel region: offsets are relative to the parent grid."""

    row_off: int
    col_off: int
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise DataError(f"window must have positive size, got {self}")
        if self.row_off < 0 or self.col_off < 0:
            raise DataError(f"window offsets must be non-negative, got {self}")

    def compose(self, inner: "Window") -> "Window":
        """The window equivalent to taking ``inner`` from a crop by ``self``."""
        if inner.row_off + inner.height > self.height or inner.col_off + inner.width > self.width:
            raise DataError(f"window {inner} exceeds parent window {self}")
        return Window(self.row_off + inner.row_off, self.col_off + inner.col_off,
                      inner.height, inner.width)


@dataclass(frozen=True)
class RasterGrid:
    """A multi-band pixel grid with square pixels in a projected CRS.

    ``values`` has shape (rows, cols, bands) and is frozen after construction;
    derive modified grids with :func:`with_values` instead of mutating.
    """

    origin_x: float
    origin_y: float
    pixel_size: float
    rows: int
    cols: int
    crs_id: str
    bands: int
    values: np.ndarray = field(repr=False)
    nodata: float | None = None

    def __post_init__(self):
        if self.pixel_size <= 0:
            raise DataError(f"pixel_size must be positive, got {self.pixel_size}")
        if self.rows < 1 or self.cols < 1 or self.bands < 1:
            raise DataError(f"empty grid: rows={self.rows} cols={self.cols} bands={self.bands}")
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.shape != (self.rows, self.cols, self.bands):
            raise DataError(
                f"values shape {v.shape} does not match "
                f"(rows, cols, bands)=({self.rows}, {self.cols}, {self.bands})")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def create(cls, values: np.ndarray, origin_x: float, origin_y: float,
               pixel_size: float, crs_id: str, nodata: float | None = None) -> "RasterGrid":
        """Build a grid from an array, inferring rows/cols/bands from its shape."""
        v = np.asarray(values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise DataError(f"values must be 2-D or 3-D, got shape {v.shape}")
        return cls(origin_x=origin_x, origin_y=origin_y, pixel_size=pixel_size,
                   rows=v.shape[0], cols=v.shape[1], crs_id=crs_id,
                   bands=v.shape[2], values=v, nodata=nodata)

    def with_values(self, values: np.ndarray, nodata="unchanged") -> "RasterGrid":
        """Same geometry, new pixel values (band count may differ)."""
        v = np.asarray(values)
        if v.ndim == 2:
            v = v[:, :, None]
        nd = self.nodata if nodata == "unchanged" else nodata
        return replace(self, values=v, bands=v.shape[2], nodata=nd)

    def band(self, index: int = 0) -> np.ndarray:
        """One band as a (rows, cols) array."""
        return self.values[:, :, index]

    def pixel_center(self, row: float, col: float) -> tuple[float, float]:
        """Projected (x, y) of the center of pixel (row, col)."""
        return (self.origin_x + (col + 0.5) * self.pixel_size,
                self.origin_y - (row + 0.5) * self.pixel_size)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the footprint."""
        return (self.origin_x,
                self.origin_y - self.rows * self.pixel_size,
                self.origin_x + self.cols * self.pixel_size,
                self.origin_y)


def read_raster(path) -> RasterGrid:
    """Read a GeoTIFF into a RasterGrid."""
    meta = geotiff.read_geotiff(path)
    values = meta.pop("values")
    return RasterGrid.create(values, **meta)


def write_raster(path, grid: RasterGrid) -> None:
    """Write a RasterGrid as a GeoTIFF."""
    geotiff.write_geotiff(path, grid.values, grid.origin_x, grid.origin_y,
                          grid.pixel_size, grid.crs_id, nodata=grid.nodata)


def _close(a: float, b: float, scale: float) -> bool:
    return abs(a - b) <= _REL_TOL * max(abs(scale), 1.0)


def align_check(a: RasterGrid, b: RasterGrid, ratio: int) -> bool:
    """True iff b covers a's footprint at pixel_size = a.pixel_size * ratio
    with dimensions exactly a's divided by ratio."""
    if ratio < 1:
        raise DataError(f"ratio must be a positive integer, got {ratio}")
    if a.crs_id != b.crs_id:
        return False
    if not _close(b.pixel_size, a.pixel_size * ratio, a.pixel_size * ratio):
        return False
    if a.rows != b.rows * ratio or a.cols != b.cols * ratio:
        return False
    ax0, ay0, ax1, ay1 = a.extent
    bx0, by0, bx1, by1 = b.extent
    span = max(ax1 - ax0, ay1 - ay0)
    return (_close(ax0, bx0, span) and _close(ay0, by0, span)
            and _close(ax1, bx1, span) and _close(ay1, by1, span))


def extract_window(g: RasterGrid, w: Window) -> RasterGrid:
    """Crop a grid to a window, shifting the origin accordingly."""
    if w.row_off + w.height > g.rows or w.col_off + w.width > g.cols:
        raise DataError(f"window {w} exceeds grid of {g.rows}x{g.cols}")
    values = g.values[w.row_off:w.row_off + w.height, w.col_off:w.col_off + w.width, :]
    return RasterGrid.create(
        values,
        origin_x=g.origin_x + w.col_off * g.pixel_size,
        origin_y=g.origin_y - w.row_off * g.pixel_size,
        pixel_size=g.pixel_size,
        crs_id=g.crs_id,
        nodata=g.nodata,
    )


def resample(g: RasterGrid, ratio: int, method: str = "average") -> RasterGrid:
    """Downsample by an integer factor.

    ``average`` takes the mean over each ratio x ratio block (continuous bands);
    ``nearest`` takes the block's central sample (categorical bands). The result
    passes align_check against the source at the same ratio.
    """
    if ratio < 1:
        raise DataError(f"ratio must be a positive integer, got {ratio}")
    if g.rows % ratio or g.cols % ratio:
        raise DataError(f"grid {g.rows}x{g.cols} not divisible by ratio {ratio}")
    if ratio == 1:
        return g
    if method == "average":
        blocks = g.values.reshape(g.rows // ratio, ratio, g.cols // ratio, ratio, g.bands)
        values = blocks.mean(axis=(1, 3), dtype=np.float64).astype(np.float64)
    elif method == "nearest":
        off = ratio // 2
        values = g.values[off::ratio, off::ratio, :]
    else:
        raise DataError(f"unknown resampling method: {method!r}")
    return RasterGrid.create(values, origin_x=g.origin_x, origin_y=g.origin_y,
                             pixel_size=g.pixel_size * ratio, crs_id=g.crs_id,
                             nodata=g.nodata)
