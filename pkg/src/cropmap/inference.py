"""Tiled full-area inference with mosaic blending and MC-dropout ensembling.

The area is covered by overlapping 256 px windows (edge windows snapped
inward); per-tile sigmoid outputs are blended with linear distance-to-edge
weights so seams vanish. A deterministic pass (dropout off) and an MC-dropout
ensemble are combined into the final probability raster, which can then be
cleaned against a landcover map.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DataError
from .model import SIGMOID, SegModel
from .patches import PATCH, LEVEL_RATIOS, check_level_grids
from .raster import RasterGrid, Window

NODATA = -1.0
DEFAULT_MARGIN = 32


@dataclass(frozen=True)
class TilingPlan:
    """The level-0 windows covering a grid, plus blending parameters."""

    windows: tuple[Window, ...]
    stride: int
    margin: int = DEFAULT_MARGIN


def _positions(size: int, stride: int) -> list[int]:
    limit = size - PATCH
    steps = list(range(0, limit + 1, stride))
    if steps[-1] != limit:
        steps.append(limit)  # snap the last window inward to the edge
    return steps


def plan_tiles(grid: RasterGrid, patch: int = PATCH, stride: int = PATCH,
               margin: int = DEFAULT_MARGIN) -> TilingPlan:
    """Enumerate covering windows for a grid at the given stride."""
    if patch != PATCH:
        raise ConfigError(f"tile size is fixed at {PATCH}, got {patch}")
    if not 0 < stride <= PATCH:
        raise ConfigError(f"stride must be in 1..{PATCH}, got {stride}")
    if grid.rows < PATCH or grid.cols < PATCH:
        raise DataError(f"grid {grid.rows}x{grid.cols} smaller than a {PATCH} px tile")
    windows = tuple(Window(r, c, PATCH, PATCH)
                    for r in _positions(grid.rows, stride)
                    for c in _positions(grid.cols, stride))
    return TilingPlan(windows=windows, stride=stride, margin=margin)


def _tile_weights(margin: int) -> np.ndarray:
    """Linear distance-to-edge blending weights, flat beyond the margin."""
    idx = np.arange(PATCH)
    edge = np.minimum(idx, PATCH - 1 - idx)
    w1d = np.minimum(edge + 1, margin + 1).astype(np.float64)
    return np.minimum.outer(w1d, w1d)


def _tile_tensors(grids, window: Window) -> list[torch.Tensor]:
    out = []
    for ratio, grid in zip(LEVEL_RATIOS, grids):
        r, c = window.row_off // ratio, window.col_off // ratio
        size = PATCH // ratio
        arr = grid.values[r:r + size, c:c + size, :]
        t = torch.from_numpy(np.array(arr, dtype=np.float32))
        out.append(t.permute(2, 0, 1))
    return out


def _check_plan(grids, plan: TilingPlan) -> RasterGrid:
    check_level_grids(grids)
    g0 = grids[0]
    if not plan.windows:
        raise DataError("tiling plan has no windows")
    for w in plan.windows:
        if w.row_off + w.height > g0.rows or w.col_off + w.width > g0.cols:
            raise DataError(f"plan window {w} exceeds grid {g0.rows}x{g0.cols}")
        if w.row_off % 8 or w.col_off % 8:
            raise DataError(f"plan window offsets must be multiples of 8 for the "
                            f"level pyramid, got {w}")
    return g0


def _validity(g0: RasterGrid) -> np.ndarray | None:
    if g0.nodata is None:
        return None
    return ~np.any(g0.values == g0.nodata, axis=2)


def _mosaic(m: SegModel, grids, plan: TilingPlan, batch_size: int) -> np.ndarray:
    """One full tiled pass; returns the blended (rows, cols) float64 map."""
    g0 = grids[0]
    acc = np.zeros((g0.rows, g0.cols), dtype=np.float64)
    wsum = np.zeros((g0.rows, g0.cols), dtype=np.float64)
    weights = _tile_weights(plan.margin)
    with torch.no_grad():
        for start in range(0, len(plan.windows), batch_size):
            chunk = plan.windows[start:start + batch_size]
            levels = [torch.stack(t) for t in
                      zip(*(_tile_tensors(grids, w) for w in chunk))]
            pred = m(*levels)[:, 0].numpy().astype(np.float64)
            for w, tile in zip(chunk, pred):
                sl = (slice(w.row_off, w.row_off + PATCH),
                      slice(w.col_off, w.col_off + PATCH))
                acc[sl] += tile * weights
                wsum[sl] += weights
    return acc / wsum


def _to_probability(mosaic: np.ndarray, g0: RasterGrid) -> RasterGrid:
    values = mosaic.astype(np.float32)
    valid = _validity(g0)
    if valid is not None:
        values = np.where(valid, values, np.float32(NODATA))
    return RasterGrid.create(values, origin_x=g0.origin_x, origin_y=g0.origin_y,
                             pixel_size=g0.pixel_size, crs_id=g0.crs_id, nodata=NODATA)


def predict_deterministic(m: SegModel, grids, plan: TilingPlan,
                          batch_size: int = 4) -> RasterGrid:
    """Single fixed-weights pass (dropout off) over the tiling plan."""
    if m.head_kind != SIGMOID:
        raise ConfigError("inference requires the sigmoid head")
    g0 = _check_plan(grids, plan)
    m.eval()
    return _to_probability(_mosaic(m, grids, plan, batch_size), g0)


@contextmanager
def _dropout_active(m: SegModel, rate: float):
    saved = [(d.p, d.training) for d in m.dropout_modules]
    try:
        for d in m.dropout_modules:
            d.p = rate
            d.train()
        yield
    finally:
        for d, (p, training) in zip(m.dropout_modules, saved):
            d.p = p
            d.train(training)


def predict_mc(m: SegModel, grids, plan: TilingPlan, k: int = 10,
               rate: float = 0.1, seed: int = 0,
               batch_size: int = 4) -> tuple[RasterGrid, RasterGrid]:
    """k stochastic passes with dropout active; per-pixel mean and std.

    The std is the population standard deviation over realizations, so k = 1
    gives exactly zero. Deterministic under (seed, batch_size).
    """
    if m.head_kind != SIGMOID:
        raise ConfigError("inference requires the sigmoid head")
    if k < 1:
        raise ConfigError(f"mc runs must be >= 1, got {k}")
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    g0 = _check_plan(grids, plan)
    m.eval()
    if rate == 0.0 or k == 1:
        # Every realization is identical, so one pass suffices and the
        # spread is exactly zero rather than a rounding residue.
        with _dropout_active(m, rate):
            torch.manual_seed(seed)
            mean = _mosaic(m, grids, plan, batch_size)
        std = np.zeros_like(mean)
    else:
        total = np.zeros((g0.rows, g0.cols), dtype=np.float64)
        total_sq = np.zeros_like(total)
        with _dropout_active(m, rate):
            for run in range(k):
                torch.manual_seed(seed + run)
                mosaic = _mosaic(m, grids, plan, batch_size)
                total += mosaic
                total_sq += mosaic ** 2
        mean = total / k
        var = np.maximum(total_sq / k - mean ** 2, 0.0)
        std = np.sqrt(var)
    mean_grid = _to_probability(mean, g0)
    std_values = std.astype(np.float32)
    valid = _validity(g0)
    if valid is not None:
        std_values = np.where(valid, std_values, np.float32(NODATA))
    std_grid = RasterGrid.create(std_values, origin_x=g0.origin_x, origin_y=g0.origin_y,
                                 pixel_size=g0.pixel_size, crs_id=g0.crs_id, nodata=NODATA)
    return mean_grid, std_grid


def combine(det: RasterGrid, mc_mean: RasterGrid, rule: str = "mean") -> RasterGrid:
    """Merge the deterministic and MC-mean rasters into the final probability map.

    The default rule is the per-pixel arithmetic mean; "mc-only" and "max"
    are available as alternatives. Nodata in either input propagates.
    """
    if (det.rows, det.cols) != (mc_mean.rows, mc_mean.cols) or \
            abs(det.pixel_size - mc_mean.pixel_size) > 1e-9 or \
            (det.origin_x, det.origin_y) != (mc_mean.origin_x, mc_mean.origin_y):
        raise DataError("combine requires identical geometry")
    a = det.band(0).astype(np.float64)
    b = mc_mean.band(0).astype(np.float64)
    invalid = np.zeros(a.shape, dtype=bool)
    if det.nodata is not None:
        invalid |= a == det.nodata
    if mc_mean.nodata is not None:
        invalid |= b == mc_mean.nodata
    if rule == "mean":
        out = (a + b) / 2.0
    elif rule == "mc-only":
        out = b
    elif rule == "max":
        out = np.maximum(a, b)
    else:
        raise ConfigError(f"unknown combination rule {rule!r}")
    out = np.where(invalid, NODATA, out).astype(np.float32)
    return det.with_values(out, nodata=NODATA)


def clean_with_landcover(prob: RasterGrid, landcover: RasterGrid,
                         suppress_codes: list[int]) -> RasterGrid:
    """Zero the probability wherever the landcover holds a suppressed code."""
    if (prob.rows, prob.cols) != (landcover.rows, landcover.cols) or \
            abs(prob.pixel_size - landcover.pixel_size) > 1e-9 or \
            (prob.origin_x, prob.origin_y) != (landcover.origin_x, landcover.origin_y):
        raise DataError("cleaning requires the landcover aligned to the probability map")
    if not suppress_codes:
        return prob
    values = prob.band(0).copy()
    suppressed = np.isin(landcover.band(0), np.asarray(list(suppress_codes)))
    if prob.nodata is not None:
        suppressed &= values != prob.nodata
    values[suppressed] = 0.0
    return prob.with_values(values)


def validate_probability(grid: RasterGrid) -> None:
    """Assert every valid pixel lies in [0, 1]."""
    values = grid.band(0)
    valid = np.ones(values.shape, dtype=bool)
    if grid.nodata is not None:
        valid = values != grid.nodata
    bad = valid & ((values < 0.0) | (values > 1.0))
    if bad.any():
        raise DataError(f"{int(bad.sum())} probability pixels outside [0, 1]")
