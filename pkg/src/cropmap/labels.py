"""Polygon labels, category schemas, and rasterization into masks.

Labels are wall-to-wall digitized polygons carrying a category name, and for
cashew an age attribute. Rasterization assigns each pixel the code of the
polygon covering its center, with later polygons winning ties.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely

from .errors import DataError
from .raster import RasterGrid

CASHEW = "Cashew"

SOURCE_TAGS = ("base-layer", "drone", "planet-scope")

# The default 21-category schema; background stays code 0.
DEFAULT_CATEGORIES = (
    "Banana", "Bare land", "Cashew", "Cassava", "Coconut", "Durian",
    "Forest Cover", "Grassland", "House", "Longan", "Maize", "Mango",
    "Orange", "Other", "Pepper", "Rice", "Road", "Rubber", "Shrubland",
    "Village", "Water Body",
)


@dataclass(frozen=True)
class CategorySchema:
    """Ordered mapping of category names to integer mask codes (background = 0)."""

    categories: tuple[tuple[str, int], ...]

    def __post_init__(self):
        codes = [c for _, c in self.categories]
        names = [n for n, _ in self.categories]
        if len(set(codes)) != len(codes):
            raise DataError("category codes must be unique")
        if len(set(names)) != len(names):
            raise DataError("category names must be unique")
        if 0 in codes:
            raise DataError("code 0 is reserved for background")

    @classmethod
    def default(cls) -> "CategorySchema":
        return cls(tuple((name, i + 1) for i, name in enumerate(DEFAULT_CATEGORIES)))

    def code(self, name: str) -> int:
        for n, c in self.categories:
            if n == name:
                return c
        raise DataError(f"unknown category: {name!r}")

    def name(self, code: int) -> str:
        if code == 0:
            return "Background"
        for n, c in self.categories:
            if c == code:
                return n
        raise DataError(f"unknown category code: {code}")

    def __contains__(self, name: str) -> bool:
        return any(n == name for n, _ in self.categories)

    def __len__(self) -> int:
        return len(self.categories)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.categories)

    @property
    def codes(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.categories)


@dataclass(frozen=True)
class LabeledPolygon:
    """A digitized label polygon: outer ring first, optional hole rings after.

    ``age_years`` is the stand age attribute and is carried for cashew
    polygons only.
    """

    rings: tuple[tuple[tuple[float, float], ...], ...]
    category: str
    age_years: float | None = None
    source_tag: str = "base-layer"
    crs_id: str | None = None
    geometry: shapely.Polygon = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.source_tag not in SOURCE_TAGS:
            raise DataError(f"unknown source_tag: {self.source_tag!r}")
        if self.category == CASHEW:
            if self.age_years is None:
                raise DataError("cashew polygons require age_years")
            if self.age_years < 0:
                raise DataError(f"age_years must be non-negative, got {self.age_years}")
        elif self.age_years is not None:
            raise DataError(f"age_years only applies to cashew, got it on {self.category!r}")
        if not self.rings:
            raise DataError("polygon needs at least an outer ring")
        closed = tuple(_close_ring(r) for r in self.rings)
        object.__setattr__(self, "rings", closed)
        geom = shapely.Polygon(closed[0], holes=closed[1:])
        if not geom.is_valid:
            raise DataError(f"invalid polygon geometry ({shapely.is_valid_reason(geom)})")
        object.__setattr__(self, "geometry", geom)

    @property
    def area(self) -> float:
        return self.geometry.area


def _close_ring(ring) -> tuple[tuple[float, float], ...]:
    pts = tuple((float(x), float(y)) for x, y in ring)
    if len(pts) < 3:
        raise DataError(f"ring needs at least 3 vertices, got {len(pts)}")
    if pts[0] != pts[-1]:
        pts = pts + (pts[0],)
    return pts


def rasterize(polygons: list[LabeledPolygon], grid: RasterGrid,
              schema: CategorySchema) -> np.ndarray:
    """Burn polygons into a (rows, cols) int32 mask over the grid's pixels.

    A pixel takes the code of the polygon covering its center; pixels covered
    by nothing stay 0; when several polygons cover one center, the last in
    list order wins.
    """
    mask = np.zeros((grid.rows, grid.cols), dtype=np.int32)
    px = grid.pixel_size
    for poly in polygons:
        if poly.crs_id is not None and poly.crs_id != grid.crs_id:
            raise DataError(f"polygon CRS {poly.crs_id!r} != grid CRS {grid.crs_id!r}")
        code = schema.code(poly.category)
        xmin, ymin, xmax, ymax = poly.geometry.bounds
        # candidate pixel index range from the bounding box (centers only)
        c0 = max(0, int(np.floor((xmin - grid.origin_x) / px - 0.5)))
        c1 = min(grid.cols - 1, int(np.ceil((xmax - grid.origin_x) / px - 0.5)))
        r0 = max(0, int(np.floor((grid.origin_y - ymax) / px - 0.5)))
        r1 = min(grid.rows - 1, int(np.ceil((grid.origin_y - ymin) / px - 0.5)))
        if c1 < c0 or r1 < r0:
            continue
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        xs = grid.origin_x + (cols + 0.5) * px
        ys = grid.origin_y - (rows + 0.5) * px
        gx, gy = np.meshgrid(xs, ys)
        covered = shapely.intersects_xy(poly.geometry, gx.ravel(), gy.ravel())
        covered = covered.reshape(gy.shape)
        mask[r0:r1 + 1, c0:c1 + 1][covered] = code
    return mask


def load_polygons(path) -> list[LabeledPolygon]:
    """Read labels from a GeoJSON FeatureCollection with properties
    ``category``, ``age_years``, ``source_tag``."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing file: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"not valid GeoJSON: {p} ({e})")
    if doc.get("type") != "FeatureCollection":
        raise DataError(f"expected a FeatureCollection, got {doc.get('type')!r}: {p}")
    crs_id = None
    crs = doc.get("crs")
    if isinstance(crs, dict):
        crs_id = crs.get("properties", {}).get("name")
    out = []
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        if geom.get("type") != "Polygon":
            raise DataError(f"feature {i}: only Polygon geometry is supported, "
                            f"got {geom.get('type')!r}")
        category = props.get("category")
        if not category:
            raise DataError(f"feature {i}: missing 'category' property")
        age = props.get("age_years")
        out.append(LabeledPolygon(
            rings=tuple(tuple((x, y) for x, y in ring) for ring in geom["coordinates"]),
            category=category,
            age_years=float(age) if age is not None else None,
            source_tag=props.get("source_tag", "base-layer"),
            crs_id=crs_id,
        ))
    return out


def save_polygons(path, polygons: list[LabeledPolygon], crs_id: str | None = None) -> None:
    """Write labels as a GeoJSON FeatureCollection."""
    features = []
    for poly in polygons:
        props = {"category": poly.category, "source_tag": poly.source_tag}
        if poly.age_years is not None:
            props["age_years"] = poly.age_years
        features.append({
            "type": "Feature",
            "geometry": {
                "type": "Polygon",
                "coordinates": [[[x, y] for x, y in ring] for ring in poly.rings],
            },
            "properties": props,
        })
    doc: dict = {"type": "FeatureCollection", "features": features}
    crs_id = crs_id or next((p.crs_id for p in polygons if p.crs_id), None)
    if crs_id:
        doc["crs"] = {"type": "name", "properties": {"name": crs_id}}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_schema(path) -> CategorySchema:
    """Read a category schema from a CSV with header ``category,code``."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing file: {p}")
    rows = []
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["category", "code"]:
            raise DataError(f"schema CSV must start with a 'category,code' header: {p}")
        for line in reader:
            if not line or not line[0].strip():
                continue
            try:
                rows.append((line[0].strip(), int(line[1])))
            except (IndexError, ValueError):
                raise DataError(f"bad schema row {line!r} in {p}")
    if not rows:
        raise DataError(f"schema CSV has no categories: {p}")
    return CategorySchema(tuple(rows))


def save_schema(path, schema: CategorySchema) -> None:
    """Write a category schema as a CSV with header ``category,code``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "code"])
        for name, code in schema.categories:
            writer.writerow([name, code])
