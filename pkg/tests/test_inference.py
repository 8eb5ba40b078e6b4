"""Tiled inference: window plans, blending exactness, MC-dropout contracts."""

import numpy as np
import pytest
import torch

from cropmap.errors import ConfigError, DataError
from cropmap.model import SIGMOID, ModelConfig, build_model, forward, swap_head
from cropmap.inference import (
    NODATA,
    clean_with_landcover,
    combine,
    plan_tiles,
    predict_deterministic,
    predict_mc,
    validate_probability,
)
from cropmap.patches import cut_patch
from cropmap.raster import Window

from conftest import make_grid

torch.set_num_threads(1)


def sigmoid_model(seed=0, dropout_rate=0.1):
    m = build_model(ModelConfig(base_channels=(4, 8, 12, 16), n_categories=5,
                                attention_inter_channels=4,
                                dropout_rate=dropout_rate), seed=seed)
    return swap_head(m, SIGMOID, seed=seed)


def level_grids(rows, cols, fill=0.0, nodata=None, seed=None):
    """A four-level pyramid of constant or random imagery."""
    grids = []
    rng = np.random.default_rng(seed) if seed is not None else None
    for i, bands in enumerate((4, 6, 6, 6)):
        shape = (rows >> i, cols >> i, bands)
        if rng is None:
            vals = np.full(shape, fill, dtype=np.float32)
        else:
            vals = rng.normal(0.5, 0.2, shape).astype(np.float32)
        grids.append(make_grid(vals, pixel_size=5.0 * (1 << i), nodata=nodata))
    return grids


def offsets(plan):
    return sorted({(w.row_off, w.col_off) for w in plan.windows})


def test_plan_exact_cover_no_overlap():
    g = make_grid(np.zeros((512, 512)))
    plan = plan_tiles(g, stride=256)
    assert len(plan.windows) == 4
    assert offsets(plan) == [(0, 0), (0, 256), (256, 0), (256, 256)]


def test_plan_half_stride_overlap():
    g = make_grid(np.zeros((512, 512)))
    plan = plan_tiles(g, stride=128)
    assert len(plan.windows) == 9
    rows = sorted({w.row_off for w in plan.windows})
    assert rows == [0, 128, 256]


def test_plan_edge_snap():
    """A 320 px grid at stride 256 gets its trailing window snapped to 64."""
    g = make_grid(np.zeros((320, 320)))
    plan = plan_tiles(g, stride=256)
    assert offsets(plan) == [(0, 0), (0, 64), (64, 0), (64, 64)]


def test_plan_single_window():
    g = make_grid(np.zeros((256, 256)))
    plan = plan_tiles(g)
    assert offsets(plan) == [(0, 0)]


def test_plan_covers_every_pixel():
    g = make_grid(np.zeros((520, 392)))
    plan = plan_tiles(g, stride=192)
    hit = np.zeros((520, 392), dtype=bool)
    for w in plan.windows:
        hit[w.row_off:w.row_off + 256, w.col_off:w.col_off + 256] = True
    assert hit.all()


def test_plan_validation():
    g = make_grid(np.zeros((512, 512)))
    with pytest.raises(ConfigError, match="stride"):
        plan_tiles(g, stride=0)
    with pytest.raises(ConfigError, match="stride"):
        plan_tiles(g, stride=512)
    with pytest.raises(ConfigError, match="tile size"):
        plan_tiles(g, patch=128)
    with pytest.raises(DataError, match="smaller"):
        plan_tiles(make_grid(np.zeros((128, 128))))


def test_blending_is_exactly_normalized():
    """Zero imagery through a fresh model gives 0.5 everywhere.

    Zero-initialized biases keep every feature map exactly zero, so each tile
    is a constant 0.5; any deviation in the mosaic would expose a blending
    normalization bug.
    """
    grids = level_grids(384, 384, fill=0.0)
    m = sigmoid_model()
    for stride in (256, 128, 64):
        out = predict_deterministic(m, grids, plan_tiles(grids[0], stride=stride))
        np.testing.assert_array_equal(out.band(0), np.full((384, 384), 0.5,
                                                           dtype=np.float32))


def test_non_overlapping_mosaic_equals_per_tile_outputs():
    grids = level_grids(512, 512, seed=4)
    m = sigmoid_model()
    plan = plan_tiles(grids[0], stride=256)
    out = predict_deterministic(m, grids, plan)
    mask = np.zeros((512, 512), dtype=np.int32)
    for w in plan.windows:
        patch = cut_patch(grids, mask, w, patch_id="t")
        direct = forward(m, patch)
        tile = out.band(0)[w.row_off:w.row_off + 256, w.col_off:w.col_off + 256]
        # batched and single-sample convolutions take different kernel paths,
        # so agreement is to float32 noise rather than bitwise
        np.testing.assert_allclose(tile, direct, atol=1e-5)


def test_deterministic_pass_is_repeatable():
    grids = level_grids(320, 320, seed=1)
    m = sigmoid_model()
    plan = plan_tiles(grids[0], stride=128)
    a = predict_deterministic(m, grids, plan)
    b = predict_deterministic(m, grids, plan)
    np.testing.assert_array_equal(a.values, b.values)


def test_inference_requires_sigmoid_head():
    grids = level_grids(256, 256)
    m = build_model(ModelConfig(base_channels=(4, 8, 12, 16), n_categories=5,
                                attention_inter_channels=4), seed=0)
    with pytest.raises(ConfigError, match="sigmoid"):
        predict_deterministic(m, grids, plan_tiles(grids[0]))


def test_nodata_pixels_are_masked():
    grids = level_grids(256, 256, seed=2)
    vals = np.array(grids[0].values)
    vals[:16, :16, 0] = -999.0
    grids[0] = grids[0].with_values(vals, nodata=-999.0)
    out = predict_deterministic(sigmoid_model(), grids, plan_tiles(grids[0]))
    assert (out.band(0)[:16, :16] == NODATA).all()
    assert (out.band(0)[32:, 32:] != NODATA).all()
    assert out.nodata == NODATA


def test_mc_rate_zero_equals_deterministic():
    grids = level_grids(256, 256, seed=3)
    m = sigmoid_model()
    plan = plan_tiles(grids[0])
    det = predict_deterministic(m, grids, plan)
    mean, std = predict_mc(m, grids, plan, k=5, rate=0.0, seed=9)
    np.testing.assert_allclose(mean.band(0), det.band(0), atol=1e-6)
    np.testing.assert_array_equal(std.band(0), np.zeros((256, 256), dtype=np.float32))


def test_mc_single_run_has_zero_spread():
    grids = level_grids(256, 256, seed=3)
    m = sigmoid_model()
    _, std = predict_mc(m, grids, plan_tiles(grids[0]), k=1, rate=0.2, seed=0)
    np.testing.assert_array_equal(std.band(0), np.zeros((256, 256), dtype=np.float32))


def test_mc_dropout_produces_spread_and_is_seeded():
    grids = level_grids(256, 256, seed=5)
    m = sigmoid_model()
    plan = plan_tiles(grids[0])
    mean_a, std_a = predict_mc(m, grids, plan, k=3, rate=0.2, seed=7)
    mean_b, std_b = predict_mc(m, grids, plan, k=3, rate=0.2, seed=7)
    mean_c, _ = predict_mc(m, grids, plan, k=3, rate=0.2, seed=8)
    assert (std_a.band(0) > 0).any()
    np.testing.assert_array_equal(mean_a.values, mean_b.values)
    np.testing.assert_array_equal(std_a.values, std_b.values)
    assert not np.array_equal(mean_a.values, mean_c.values)


def test_mc_leaves_model_deterministic_afterwards():
    """The dropout override must be fully undone after the MC pass."""
    grids = level_grids(256, 256, seed=6)
    m = sigmoid_model()
    plan = plan_tiles(grids[0])
    before = predict_deterministic(m, grids, plan)
    predict_mc(m, grids, plan, k=2, rate=0.3, seed=0)
    after = predict_deterministic(m, grids, plan)
    np.testing.assert_array_equal(before.values, after.values)
    assert all(d.p == 0.1 for d in m.dropout_modules)


def test_mc_validation():
    grids = level_grids(256, 256)
    m = sigmoid_model()
    plan = plan_tiles(grids[0])
    with pytest.raises(ConfigError, match="runs"):
        predict_mc(m, grids, plan, k=0)
    with pytest.raises(ConfigError, match="rate"):
        predict_mc(m, grids, plan, rate=1.0)


def test_combine_rules():
    det = make_grid(np.array([[0.2, 0.8], [NODATA, 0.4]], dtype=np.float32),
                    nodata=NODATA)
    mc = make_grid(np.array([[0.4, 0.6], [0.5, NODATA]], dtype=np.float32),
                   nodata=NODATA)
    mean = combine(det, mc, rule="mean")
    np.testing.assert_allclose(mean.band(0)[0], [0.3, 0.7], atol=1e-7)
    # nodata in either input wins
    assert mean.band(0)[1, 0] == NODATA and mean.band(0)[1, 1] == NODATA
    only = combine(det, mc, rule="mc-only")
    assert only.band(0)[0, 0] == pytest.approx(0.4)
    mx = combine(det, mc, rule="max")
    assert mx.band(0)[0, 0] == pytest.approx(0.4)
    assert mx.band(0)[0, 1] == pytest.approx(0.8)
    with pytest.raises(ConfigError, match="rule"):
        combine(det, mc, rule="median")
    shifted = make_grid(np.zeros((2, 2), dtype=np.float32), origin_x=999.0)
    with pytest.raises(DataError, match="geometry"):
        combine(det, shifted)


def test_clean_with_landcover_zeroes_suppressed_codes():
    prob_vals = np.array([[0.9, 0.8], [0.7, NODATA]], dtype=np.float32)
    prob = make_grid(prob_vals, nodata=NODATA)
    lc = make_grid(np.array([[7, 2], [7, 7]], dtype=np.int32))
    out = clean_with_landcover(prob, lc, [7])
    np.testing.assert_allclose(out.band(0), [[0.0, 0.8], [0.0, NODATA]])
    # empty suppression list is the identity
    assert clean_with_landcover(prob, lc, []) is prob
    misaligned = make_grid(np.zeros((2, 2), dtype=np.int32), pixel_size=10.0)
    with pytest.raises(DataError, match="aligned"):
        clean_with_landcover(prob, misaligned, [7])


def test_validate_probability():
    good = make_grid(np.array([[0.0, 1.0], [NODATA, 0.5]], dtype=np.float32),
                     nodata=NODATA)
    validate_probability(good)
    bad = make_grid(np.array([[0.0, 1.5]], dtype=np.float32))
    with pytest.raises(DataError, match="outside"):
        validate_probability(bad)
    negative = make_grid(np.array([[-0.1, 0.5]], dtype=np.float32))
    with pytest.raises(DataError, match="outside"):
        validate_probability(negative)


def test_plan_rejects_unaligned_windows():
    grids = level_grids(320, 320)
    from cropmap.inference import TilingPlan
    bad = TilingPlan(windows=(Window(4, 0, 256, 256),), stride=256)
    big = TilingPlan(windows=(Window(72, 0, 256, 256),), stride=256)
    m = sigmoid_model()
    with pytest.raises(DataError, match="multiples of 8"):
        predict_deterministic(m, grids, bad)
    with pytest.raises(DataError, match="exceeds"):
        predict_deterministic(m, grids, big)
