"""Patch extraction, augmentation, phase-2 filtering, and the patch cache.

A PatchStack is one training example: co-registered crops of the four input
levels plus the label mask, all anchored to a 256 px window at level 0.
Window offsets are kept divisible by 8 so every coarser level crops on an
exact pixel boundary.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .labels import CASHEW, CategorySchema, LabeledPolygon, rasterize
from .raster import RasterGrid, Window, align_check, extract_window

PATCH = 256
LEVEL_RATIOS = (1, 2, 4, 8)
_FLIP_IDS = (4, 5, 6, 7)
# transform t<4 is rot90 by t; t>=4 is rot90 by (t-4) after a horizontal flip.
# Rotations invert to the complementary rotation; reflections are involutions.
INVERSE_TRANSFORM = (0, 3, 2, 1, 4, 5, 6, 7)


@dataclass(frozen=True)
class PatchMeta:
    """Provenance of one patch: where it came from and what was done to it."""

    patch_id: str
    window: Window
    origin_x: float
    origin_y: float
    pixel_size: float
    crs_id: str
    transforms: tuple[int, ...] = ()


@dataclass(frozen=True)
class PatchStack:
    """One training example across the four input levels."""

    level0: np.ndarray
    level1: np.ndarray
    level2: np.ndarray
    level3: np.ndarray
    label_mask: np.ndarray
    meta: PatchMeta
    binary_mask: np.ndarray | None = None

    def __post_init__(self):
        sizes = (PATCH, PATCH // 2, PATCH // 4, PATCH // 8)
        for name, size in zip(("level0", "level1", "level2", "level3"), sizes):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (size, size):
                raise DataError(f"{name} must be {size}x{size}xC, got {arr.shape}")
        if self.label_mask.shape != (PATCH, PATCH):
            raise DataError(f"label_mask must be {PATCH}x{PATCH}, got {self.label_mask.shape}")
        if self.binary_mask is not None:
            if self.binary_mask.shape != (PATCH, PATCH):
                raise DataError(f"binary_mask must be {PATCH}x{PATCH}, "
                                f"got {self.binary_mask.shape}")
            bad = set(np.unique(self.binary_mask)) - {0, 1}
            if bad:
                raise DataError(f"binary_mask must be 0/1, found {sorted(bad)}")

    @property
    def levels(self) -> tuple[np.ndarray, ...]:
        return (self.level0, self.level1, self.level2, self.level3)


def check_level_grids(grids) -> None:
    """Validate that four grids nest at ratios 1, 2, 4, 8 against the first."""
    if len(grids) != 4:
        raise DataError(f"expected 4 level grids, got {len(grids)}")
    for level, ratio in enumerate(LEVEL_RATIOS[1:], start=1):
        if not align_check(grids[0], grids[level], ratio):
            raise DataError(f"level {level} grid misaligned with level 0 (ratio {ratio})")


def sample_patches(grids, mask: np.ndarray, n: int, seed: int) -> list[PatchStack]:
    """Draw n random (possibly overlapping) patch windows, deterministically.

    Offsets are uniform over the 8-aligned positions that keep the 256 px
    level-0 window inside the grid.
    """
    check_level_grids(grids)
    g0 = grids[0]
    if mask.shape != (g0.rows, g0.cols):
        raise DataError(f"mask shape {mask.shape} does not match level-0 grid "
                        f"{g0.rows}x{g0.cols}")
    if g0.rows < PATCH or g0.cols < PATCH:
        raise DataError(f"grid {g0.rows}x{g0.cols} smaller than the {PATCH} px patch size")
    rng = np.random.default_rng(seed)
    row_max = (g0.rows - PATCH) // 8
    col_max = (g0.cols - PATCH) // 8
    out = []
    for i in range(n):
        r = int(rng.integers(0, row_max + 1)) * 8
        c = int(rng.integers(0, col_max + 1)) * 8
        out.append(cut_patch(grids, mask, Window(r, c, PATCH, PATCH), patch_id=f"p{i:05d}"))
    return out


def cut_patch(grids, mask: np.ndarray, window: Window, patch_id: str) -> PatchStack:
    """Cut one PatchStack at a level-0 window (offsets must be 8-aligned)."""
    if window.height != PATCH or window.width != PATCH:
        raise DataError(f"patch windows are {PATCH}x{PATCH}, got {window}")
    if window.row_off % 8 or window.col_off % 8:
        raise DataError(f"patch offsets must be multiples of 8, got {window}")
    g0 = grids[0]
    levels = []
    for ratio, grid in zip(LEVEL_RATIOS, grids):
        w = Window(window.row_off // ratio, window.col_off // ratio,
                   PATCH // ratio, PATCH // ratio)
        levels.append(extract_window(grid, w).values)
    label = mask[window.row_off:window.row_off + PATCH,
                 window.col_off:window.col_off + PATCH]
    meta = PatchMeta(
        patch_id=patch_id,
        window=window,
        origin_x=g0.origin_x + window.col_off * g0.pixel_size,
        origin_y=g0.origin_y - window.row_off * g0.pixel_size,
        pixel_size=g0.pixel_size,
        crs_id=g0.crs_id,
    )
    return PatchStack(*levels, label_mask=np.ascontiguousarray(label), meta=meta)


def _apply_transform(arr: np.ndarray, t: int) -> np.ndarray:
    out = arr
    if t >= 4:
        out = np.flip(out, axis=1)
    return np.ascontiguousarray(np.rot90(out, k=t % 4, axes=(0, 1)))


def augment(p: PatchStack, transform: int) -> PatchStack:
    """Apply one of the 8 dihedral transforms (0 = identity) to all layers."""
    if transform not in range(8):
        raise DataError(f"transform must be in 0..7, got {transform}")
    if transform == 0:
        return p
    binary = None if p.binary_mask is None else _apply_transform(p.binary_mask, transform)
    return replace(
        p,
        level0=_apply_transform(p.level0, transform),
        level1=_apply_transform(p.level1, transform),
        level2=_apply_transform(p.level2, transform),
        level3=_apply_transform(p.level3, transform),
        label_mask=_apply_transform(p.label_mask, transform),
        binary_mask=binary,
        meta=replace(p.meta, transforms=p.meta.transforms + (transform,)),
    )


def _patch_grid(p: PatchStack) -> RasterGrid:
    """The level-0 footprint of a patch as a grid (for rasterizing onto it)."""
    return RasterGrid.create(np.zeros((PATCH, PATCH), dtype=np.int32),
                             origin_x=p.meta.origin_x, origin_y=p.meta.origin_y,
                             pixel_size=p.meta.pixel_size, crs_id=p.meta.crs_id)


def filter_phase2(patches, polygons, min_age: float = 3.0,
                  min_fraction: float = 0.0) -> list[PatchStack]:
    """Keep patches containing cashew older than min_age; fill binary_mask.

    The mask marks pixels of qualifying cashew polygons (age strictly greater
    than min_age) as 1; everything else 0. A patch is retained when the
    qualifying fraction exceeds min_fraction (default: any qualifying pixel).
    """
    qualifying = [p for p in polygons
                  if p.category == CASHEW and p.age_years is not None
                  and p.age_years > min_age]
    schema = CategorySchema(((CASHEW, 1),))
    out = []
    for patch in patches:
        mask = rasterize(qualifying, _patch_grid(patch), schema).astype(np.uint8)
        # replay the patch's augmentation history onto the freshly burnt mask
        for t in patch.meta.transforms:
            mask = _apply_transform(mask, t)
        frac = float(mask.mean())
        if frac > min_fraction and mask.any():
            out.append(replace(patch, binary_mask=mask))
    return out


def _schema_hash(schema: CategorySchema) -> str:
    text = ";".join(f"{n}={c}" for n, c in schema.categories)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_cache(path, patches, schema: CategorySchema, seed: int | None = None) -> None:
    """Store patches in one .npz record file with a JSON sidecar manifest."""
    if not patches:
        raise DataError("refusing to write an empty patch cache")
    path = Path(path)
    arrays = {}
    for name in ("level0", "level1", "level2", "level3", "label_mask"):
        arrays[name] = np.stack([getattr(p, name) for p in patches])
    has_binary = [p.binary_mask is not None for p in patches]
    if all(has_binary):
        arrays["binary_mask"] = np.stack([p.binary_mask for p in patches])
    elif any(has_binary):
        raise DataError("cannot cache a mix of patches with and without binary_mask")
    np.savez(path, **arrays)
    meta = {
        "version": 1,
        "count": len(patches),
        "seed": seed,
        "schema_hash": _schema_hash(schema),
        "patches": [{
            "patch_id": p.meta.patch_id,
            "window": [p.meta.window.row_off, p.meta.window.col_off,
                       p.meta.window.height, p.meta.window.width],
            "origin_x": p.meta.origin_x,
            "origin_y": p.meta.origin_y,
            "pixel_size": p.meta.pixel_size,
            "crs_id": p.meta.crs_id,
            "transforms": list(p.meta.transforms),
        } for p in patches],
    }
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")


def read_cache(path) -> tuple[list[PatchStack], dict]:
    """Load patches and the sidecar manifest written by write_cache."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not sidecar.exists():
        raise DataError(f"patch cache incomplete: need both {path} and {sidecar}")
    meta = json.loads(sidecar.read_text())
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    patches = []
    for i, rec in enumerate(meta["patches"]):
        patches.append(PatchStack(
            level0=arrays["level0"][i],
            level1=arrays["level1"][i],
            level2=arrays["level2"][i],
            level3=arrays["level3"][i],
            label_mask=arrays["label_mask"][i],
            binary_mask=arrays["binary_mask"][i] if "binary_mask" in arrays else None,
            meta=PatchMeta(
                patch_id=rec["patch_id"],
                window=Window(*rec["window"]),
                origin_x=rec["origin_x"],
                origin_y=rec["origin_y"],
                pixel_size=rec["pixel_size"],
                crs_id=rec["crs_id"],
                transforms=tuple(rec["transforms"]),
            ),
        ))
    return patches, meta
