"""Synthetic landscape generator for desk-scale verification.

Builds a co-registered four-level image stack over a field mosaic with known
ground truth. Fields are pixel-aligned rectangles (a recursive guillotine
partition), so every truth polygon's area equals its pixel count times the
pixel area exactly. Pixel values are per-category spectral signatures plus
Gaussian noise, which keeps categories separable enough to train a small
model in seconds while still exercising the full pipeline.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .labels import CASHEW, CategorySchema, LabeledPolygon
from .raster import RasterGrid

LEVEL_RATIOS = (1, 2, 4, 8)
DEFAULT_BAND_COUNTS = (4, 6, 6, 6)


@dataclass(frozen=True)
class SyntheticConfig:
    """Declarative recipe for one synthetic landscape."""

    rows: int = 1024
    cols: int = 1024
    pixel_size: float = 5.0
    origin_x: float = 500000.0
    origin_y: float = 1500000.0
    crs_id: str = "EPSG:32648"
    mixture: dict = field(default_factory=lambda: {"Cashew": 0.3, "Forest Cover": 0.5, "Bare land": 0.2})
    field_px_min: int = 16
    field_px_max: int = 64
    band_counts: tuple = DEFAULT_BAND_COUNTS
    noise_std: float = 0.05
    age_min: int = 1
    age_max: int = 20

    def __post_init__(self):
        if self.rows < 256 or self.cols < 256:
            raise ConfigError(f"landscape must be at least 256x256, got {self.rows}x{self.cols}")
        if self.rows % 8 or self.cols % 8:
            raise ConfigError(f"landscape dimensions must divide by 8, got {self.rows}x{self.cols}")
        if self.pixel_size <= 0:
            raise ConfigError(f"pixel_size must be positive, got {self.pixel_size}")
        if not self.mixture:
            raise ConfigError("mixture must name at least one category")
        for name, frac in self.mixture.items():
            if frac <= 0:
                raise ConfigError(f"mixture fraction for {name!r} must be positive, got {frac}")
        total = sum(self.mixture.values())
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(f"mixture fractions must sum to 1, got {total}")
        if len(self.band_counts) != 4 or any(c < 1 for c in self.band_counts):
            raise ConfigError(f"band_counts needs four positive entries, got {self.band_counts}")
        if self.field_px_min < 4 or self.field_px_max < 2 * self.field_px_min:
            raise ConfigError(
                f"need field_px_min >= 4 and field_px_max >= 2*field_px_min, "
                f"got {self.field_px_min}/{self.field_px_max}")
        if not (0 <= self.age_min <= self.age_max):
            raise ConfigError(f"bad age range {self.age_min}..{self.age_max}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be non-negative, got {self.noise_std}")


@dataclass(frozen=True)
class SyntheticLandscape:
    """Generator output: imagery, truth polygons, and the truth mask."""

    grids: tuple[RasterGrid, ...]
    polygons: tuple[LabeledPolygon, ...]
    mask: np.ndarray
    schema: CategorySchema
    config: SyntheticConfig


def signature(category: str, level: int, n_bands: int) -> np.ndarray:
    """Deterministic per-category spectral signature for one level.

    Derived from a hash of the category name so the same category always
    looks the same regardless of landscape seed or mixture.
    """
    digest = hashlib.sha256(f"{category}/level{level}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.uniform(0.1, 0.9, size=n_bands).astype(np.float32)


def _partition(rows: int, cols: int, smin: int, smax: int, rng) -> list[tuple[int, int, int, int]]:
    """Split (rows x cols) into rectangles with sides in [smin, 2*smax)."""
    stack = [(0, 0, rows, cols)]
    done = []
    while stack:
        r0, c0, h, w = stack.pop()
        if max(h, w) <= smax:
            done.append((r0, c0, h, w))
            continue
        if h >= w:
            cut = int(rng.integers(smin, h - smin + 1))
            stack.append((r0, c0, cut, w))
            stack.append((r0 + cut, c0, h - cut, w))
        else:
            cut = int(rng.integers(smin, w - smin + 1))
            stack.append((r0, c0, h, cut))
            stack.append((r0, c0 + cut, h, w - cut))
    return done


def generate_synthetic_landscape(config: SyntheticConfig, seed: int) -> SyntheticLandscape:
    """Generate the four-level stack, truth polygons, and truth mask."""
    schema = CategorySchema.default()
    for name in config.mixture:
        if name not in schema:
            raise ConfigError(f"mixture names unknown category {name!r}")
    rng = np.random.default_rng(seed)

    rects = _partition(config.rows, config.cols, config.field_px_min, config.field_px_max, rng)
    order = rng.permutation(len(rects))

    # greedy quota fill: each field takes the category furthest below target
    names = list(config.mixture)
    deficits = {n: config.mixture[n] * config.rows * config.cols for n in names}
    mask = np.zeros((config.rows, config.cols), dtype=np.int32)
    polygons = []
    px = config.pixel_size
    for idx in order:
        r0, c0, h, w = rects[idx]
        name = max(names, key=lambda n: deficits[n])
        deficits[name] -= h * w
        mask[r0:r0 + h, c0:c0 + w] = schema.code(name)
        x0 = config.origin_x + c0 * px
        x1 = config.origin_x + (c0 + w) * px
        y0 = config.origin_y - r0 * px
        y1 = config.origin_y - (r0 + h) * px
        age = None
        if name == CASHEW:
            age = float(rng.integers(config.age_min, config.age_max + 1))
        polygons.append(LabeledPolygon(
            rings=(((x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)),),
            category=name,
            age_years=age,
            crs_id=config.crs_id,
        ))

    grids = []
    for level, (ratio, n_bands) in enumerate(zip(LEVEL_RATIOS, config.band_counts)):
        # category geometry at this level: central sample of each ratio-block
        off = ratio // 2
        level_mask = mask[off::ratio, off::ratio] if ratio > 1 else mask
        table = np.zeros((max(schema.codes) + 1, n_bands), dtype=np.float32)
        for name, code in schema.categories:
            table[code] = signature(name, level, n_bands)
        values = table[level_mask]
        if config.noise_std > 0:
            values = values + rng.normal(0.0, config.noise_std, size=values.shape).astype(np.float32)
        grids.append(RasterGrid.create(
            values.astype(np.float32),
            origin_x=config.origin_x, origin_y=config.origin_y,
            pixel_size=px * ratio, crs_id=config.crs_id))

    return SyntheticLandscape(grids=tuple(grids), polygons=tuple(polygons),
                              mask=mask, schema=schema, config=config)


def landcover_grid(landscape: SyntheticLandscape) -> RasterGrid:
    """The truth mask as a single-band landcover raster at level-0 geometry."""
    g0 = landscape.grids[0]
    return RasterGrid.create(landscape.mask.astype(np.int32),
                             origin_x=g0.origin_x, origin_y=g0.origin_y,
                             pixel_size=g0.pixel_size, crs_id=g0.crs_id)
