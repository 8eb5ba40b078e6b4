"""Patch cutting, dihedral augmentation, phase-2 filtering, and the cache."""

import numpy as np
import pytest

from cropmap.errors import DataError
from cropmap.labels import CASHEW, CategorySchema, LabeledPolygon
from cropmap.patches import (
    INVERSE_TRANSFORM,
    PATCH,
    PatchStack,
    augment,
    cut_patch,
    filter_phase2,
    read_cache,
    sample_patches,
    write_cache,
)
from cropmap.raster import Window


@pytest.fixture(scope="module")
def patches(landscape):
    return sample_patches(landscape.grids, landscape.mask, n=12, seed=11)


def test_sampling_is_deterministic(landscape):
    a = sample_patches(landscape.grids, landscape.mask, n=5, seed=1)
    b = sample_patches(landscape.grids, landscape.mask, n=5, seed=1)
    c = sample_patches(landscape.grids, landscape.mask, n=5, seed=2)
    for pa, pb in zip(a, b):
        assert pa.meta.window == pb.meta.window
        np.testing.assert_array_equal(pa.level0, pb.level0)
    assert any(pa.meta.window != pc.meta.window for pa, pc in zip(a, c))


def test_sampled_windows_inside_grid_and_aligned(landscape):
    many = sample_patches(landscape.grids, landscape.mask, n=1000, seed=3)
    rows, cols = landscape.mask.shape
    seen = set()
    for p in many:
        w = p.meta.window
        assert w.row_off % 8 == 0 and w.col_off % 8 == 0
        assert 0 <= w.row_off <= rows - PATCH
        assert 0 <= w.col_off <= cols - PATCH
        seen.add((w.row_off, w.col_off))
    # with 1000 draws over a 512 grid there must be many repeats and spread
    assert 30 < len(seen) < 1000


def test_zero_patches_is_empty_list(landscape):
    assert sample_patches(landscape.grids, landscape.mask, n=0, seed=0) == []


def test_cut_patch_layers_window_consistently(landscape):
    w = Window(64, 128, PATCH, PATCH)
    p = cut_patch(landscape.grids, landscape.mask, w, patch_id="x")
    np.testing.assert_array_equal(
        p.label_mask, landscape.mask[64:64 + 256, 128:128 + 256])
    np.testing.assert_array_equal(
        p.level0, landscape.grids[0].values[64:64 + 256, 128:128 + 256])
    # level 2 is the same footprint at a quarter of the resolution
    np.testing.assert_array_equal(
        p.level2, landscape.grids[2].values[16:16 + 64, 32:32 + 64])
    assert p.meta.origin_x == landscape.grids[0].origin_x + 128 * 5.0
    assert p.meta.origin_y == landscape.grids[0].origin_y - 64 * 5.0


def test_cut_patch_rejects_unaligned_offsets(landscape):
    with pytest.raises(DataError, match="multiples of 8"):
        cut_patch(landscape.grids, landscape.mask, Window(4, 0, PATCH, PATCH), "x")
    with pytest.raises(DataError, match="patch windows"):
        cut_patch(landscape.grids, landscape.mask, Window(0, 0, 128, 128), "x")


def marker_patch():
    """An asymmetric patch whose corners identify every dihedral transform."""
    label = np.zeros((PATCH, PATCH), dtype=np.int32)
    label[0, 0] = 1
    label[0, -1] = 2
    label[-1, -1] = 3
    label[-1, 0] = 4
    levels = [np.zeros((PATCH // r, PATCH // r, 2), dtype=np.float32)
              for r in (1, 2, 4, 8)]
    for lev, r in zip(levels, (1, 2, 4, 8)):
        lev[0, 0, 0] = 1.0
        lev[0, -1, 0] = 2.0
    from cropmap.patches import PatchMeta
    meta = PatchMeta(patch_id="m", window=Window(0, 0, PATCH, PATCH),
                     origin_x=0.0, origin_y=PATCH * 5.0, pixel_size=5.0,
                     crs_id="EPSG:32648")
    return PatchStack(*levels, label_mask=label, meta=meta)


def test_rotation_oracle_on_corner_markers():
    """rot90 once maps corners (tl, tr, br, bl) -> (tr, br, bl, tl).

    With numpy's rot90 convention (counter-clockwise in array axes), the
    top-left marker 1 must land bottom-left after one step.
    """
    p = marker_patch()
    r1 = augment(p, 1)
    lab = r1.label_mask
    assert lab[-1, 0] == 1 and lab[0, 0] == 2 and lab[0, -1] == 3 and lab[-1, -1] == 4
    r2 = augment(p, 2)
    lab2 = r2.label_mask
    assert lab2[-1, -1] == 1 and lab2[0, 0] == 3


def test_flip_oracle_on_corner_markers():
    p = marker_patch()
    f = augment(p, 4)
    lab = f.label_mask
    # horizontal flip swaps left and right columns
    assert lab[0, -1] == 1 and lab[0, 0] == 2 and lab[-1, 0] == 3 and lab[-1, -1] == 4
    assert f.level0[0, -1, 0] == 1.0 and f.level0[0, 0, 0] == 2.0


def test_all_levels_transform_together():
    p = marker_patch()
    for t in range(8):
        q = augment(p, t)
        for lev in q.levels:
            # both markers must remain, wherever they land
            assert (lev[:, :, 0] == 1.0).sum() == 1
            assert (lev[:, :, 0] == 2.0).sum() == 1


def test_inverse_transform_restores_original():
    p = marker_patch()
    for t in range(8):
        q = augment(augment(p, t), INVERSE_TRANSFORM[t])
        np.testing.assert_array_equal(q.label_mask, p.label_mask)
        np.testing.assert_array_equal(q.level0, p.level0)
        np.testing.assert_array_equal(q.level3, p.level3)


def test_augment_records_history():
    p = marker_patch()
    q = augment(augment(p, 3), 5)
    assert q.meta.transforms == (3, 5)
    assert augment(p, 0) is p
    with pytest.raises(DataError):
        augment(p, 8)


def test_category_census_preserved_under_augment(patches):
    for p in patches[:4]:
        for t in range(8):
            q = augment(p, t)
            np.testing.assert_array_equal(
                np.bincount(q.label_mask.ravel(), minlength=25),
                np.bincount(p.label_mask.ravel(), minlength=25))


def qualifying_polygon(age, x0=0.0, y0=1280.0, size=200.0):
    return LabeledPolygon(
        rings=[[(x0, y0 - size), (x0 + size, y0 - size), (x0 + size, y0), (x0, y0)]],
        category=CASHEW, age_years=age)


def test_filter_phase2_age_gate(landscape):
    """Only cashew strictly older than min_age survives into the binary mask."""
    p = cut_patch(landscape.grids, landscape.mask, Window(0, 0, PATCH, PATCH), "x")
    g0 = landscape.grids[0]
    x0, y0 = g0.origin_x, g0.origin_y
    old = qualifying_polygon(5.0, x0=x0, y0=y0)
    young = qualifying_polygon(2.0, x0=x0, y0=y0)
    kept = filter_phase2([p], [old], min_age=3.0)
    assert len(kept) == 1
    assert kept[0].binary_mask.sum() == 40 * 40  # 200 m / 5 m = 40 px square
    assert filter_phase2([p], [young], min_age=3.0) == []
    # boundary age equal to min_age does not qualify (strict inequality)
    assert filter_phase2([p], [qualifying_polygon(3.0, x0=x0, y0=y0)], min_age=3.0) == []


def test_filter_phase2_no_cashew_drops_patch(landscape):
    p = cut_patch(landscape.grids, landscape.mask, Window(0, 0, PATCH, PATCH), "x")
    rice = LabeledPolygon(rings=[[(0, 0), (50, 0), (50, 50), (0, 50)]],
                          category="Rice")
    assert filter_phase2([p], [rice]) == []
    assert filter_phase2([p], []) == []


def test_filter_phase2_min_fraction(landscape):
    p = cut_patch(landscape.grids, landscape.mask, Window(0, 0, PATCH, PATCH), "x")
    g0 = landscape.grids[0]
    small = qualifying_polygon(6.0, x0=g0.origin_x, y0=g0.origin_y, size=100.0)
    # 20 x 20 px of 256 x 256 is a fraction of about 0.0061
    assert len(filter_phase2([p], [small], min_fraction=0.005)) == 1
    assert filter_phase2([p], [small], min_fraction=0.01) == []


def test_filter_phase2_replays_augmentation(landscape):
    """The binary mask of an augmented patch must be the augmented mask."""
    p = cut_patch(landscape.grids, landscape.mask, Window(0, 0, PATCH, PATCH), "x")
    g0 = landscape.grids[0]
    poly = qualifying_polygon(6.0, x0=g0.origin_x, y0=g0.origin_y, size=100.0)
    plain = filter_phase2([p], [poly])[0]
    rotated = filter_phase2([augment(p, 1)], [poly])[0]
    np.testing.assert_array_equal(rotated.binary_mask,
                                  np.rot90(plain.binary_mask, k=1))


def test_cache_round_trip(tmp_path, landscape, patches):
    schema = landscape.schema
    path = tmp_path / "cache.npz"
    write_cache(path, patches, schema, seed=11)
    back, meta = read_cache(path)
    assert meta["count"] == len(patches)
    assert meta["seed"] == 11
    assert len(back) == len(patches)
    for orig, rest in zip(patches, back):
        np.testing.assert_array_equal(orig.level0, rest.level0)
        np.testing.assert_array_equal(orig.level3, rest.level3)
        np.testing.assert_array_equal(orig.label_mask, rest.label_mask)
        assert orig.meta == rest.meta
        assert rest.binary_mask is None


def test_cache_round_trip_with_binary(tmp_path, landscape):
    p = cut_patch(landscape.grids, landscape.mask, Window(0, 0, PATCH, PATCH), "x")
    g0 = landscape.grids[0]
    poly = qualifying_polygon(6.0, x0=g0.origin_x, y0=g0.origin_y)
    kept = filter_phase2([p], [poly])
    path = tmp_path / "bin.npz"
    write_cache(path, kept, landscape.schema)
    back, _ = read_cache(path)
    np.testing.assert_array_equal(back[0].binary_mask, kept[0].binary_mask)


def test_cache_errors(tmp_path, landscape, patches):
    with pytest.raises(DataError, match="empty"):
        write_cache(tmp_path / "e.npz", [], landscape.schema)
    path = tmp_path / "c.npz"
    write_cache(path, patches[:2], landscape.schema)
    path.with_suffix(".npz.json").unlink()
    with pytest.raises(DataError, match="incomplete"):
        read_cache(path)


def test_cache_schema_hash_tracks_schema(tmp_path, landscape, patches):
    path_a = tmp_path / "a.npz"
    path_b = tmp_path / "b.npz"
    write_cache(path_a, patches[:1], landscape.schema)
    write_cache(path_b, patches[:1], CategorySchema((("Cashew", 1),)))
    import json
    ha = json.loads(path_a.with_suffix(".npz.json").read_text())["schema_hash"]
    hb = json.loads(path_b.with_suffix(".npz.json").read_text())["schema_hash"]
    assert ha != hb
