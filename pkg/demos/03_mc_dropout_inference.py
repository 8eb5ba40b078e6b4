"""Map cashew probability wall-to-wall with Monte Carlo dropout.

A trained model predicts 256 px tiles; overlapping tiles are blended with a
margin so seams disappear. Running the tiling k times with dropout active
gives a per-pixel mean probability and a standard deviation, which is a
cheap uncertainty map: pixels the model is unsure about get a high spread.
The demo trains a throwaway model first (same recipe as demo 02), then maps
the whole landscape and checks the map against the known truth.

Run from the repository root:  python3 demos/03_mc_dropout_inference.py
"""

import time
from pathlib import Path

from scipy import ndimage

from cropmap import synthetic
from cropmap.inference import clean_with_landcover, plan_tiles, predict_deterministic, predict_mc, validate_probability
from cropmap.model import ModelConfig, build_model
from cropmap.patches import filter_phase2, sample_patches
from cropmap.raster import write_raster
from cropmap.train import TrainConfig, split_by_square, train_phase1, train_phase2

out = Path(__file__).parent / "out" / "03_mc_dropout_inference"
out.mkdir(parents=True, exist_ok=True)

# step 1: landscape and a quickly trained two-phase model (see demo 02)
config = synthetic.SyntheticConfig(
    rows=768, cols=768,
    mixture={"Cashew": 0.4, "Forest Cover": 0.4, "Bare land": 0.2})
land = synthetic.generate_synthetic_landscape(config, seed=7)
stacks = sample_patches(land.grids, land.mask, n=24, seed=11)
tr, va = split_by_square(stacks, val_fraction=0.25, seed=13)
m = build_model(ModelConfig(base_channels=(8, 16, 24, 32), n_categories=8,
                            attention_inter_channels=8, dropout_rate=0.1), seed=23)
m, _ = train_phase1(m, tr, va, TrainConfig(phase=1, batch_size=8, max_epochs=4,
                                           patience=4, learning_rate=2e-3, seed=17))
mature = filter_phase2(stacks, land.polygons, min_age=3.0)
tr2, va2 = split_by_square(mature, val_fraction=0.25, seed=13)
m, _ = train_phase2(m, tr2, va2, TrainConfig(phase=2, batch_size=8, max_epochs=4,
                                             patience=4, learning_rate=2e-3, seed=19))
print(f"trained a {m.head_kind}-head model")

# step 2: plan overlapping 256 px tiles over the level-0 grid
plan = plan_tiles(land.grids[0], stride=128)
print(f"tiling: {len(plan.windows)} tiles, stride {plan.stride}, margin {plan.margin}")

# step 3: one deterministic pass (dropout off) for the headline map
t0 = time.time()
det = predict_deterministic(m, land.grids, plan)
print(f"deterministic pass in {time.time() - t0:.0f}s")

# step 4: k stochastic passes with dropout kept on at rate 0.1
t0 = time.time()
mean, std = predict_mc(m, land.grids, plan, k=8, rate=0.1, seed=29)
print(f"8 MC passes in {time.time() - t0:.0f}s")

# every output is a checked probability raster on the level-0 geometry
for grid in (det, mean):
    validate_probability(grid)
print(f"probability range: det [{det.band().min():.3f}, {det.band().max():.3f}], "
      f"mc mean [{mean.band().min():.3f}, {mean.band().max():.3f}]")

# step 5: the spread map shows where dropout perturbs the answer; deep
# inside cashew stands the prediction barely moves, while background
# classes and field boundaries wobble more from pass to pass
truth = land.mask == land.schema.code("Cashew")
inside = ndimage.binary_erosion(truth, iterations=3)
outside = ndimage.binary_erosion(~truth, iterations=3)
edges = ~(inside | outside)
print(f"mean MC std: {std.band()[inside].mean():.4f} inside cashew, "
      f"{std.band()[edges].mean():.4f} on field edges, "
      f"{std.band()[outside].mean():.4f} on other classes")

# step 6: thresholding the mean probability should reproduce the truth mask
pred = mean.band() > 0.5
agree = (pred == truth).mean()
print(f"pixel agreement with truth at 0.5: {agree:.3f}")

# step 7: a land-cover mask can veto impossible classes, e.g. force the
# probability to zero over bare land before any area statistics
landcover = synthetic.landcover_grid(land)
cleaned = clean_with_landcover(mean, landcover, suppress_codes=[land.schema.code("Bare land")])
bare = land.mask == land.schema.code("Bare land")
print(f"after suppression, max probability over bare land: "
      f"{cleaned.band()[bare].max():.3f}")

write_raster(out / "probability.tif", cleaned)
write_raster(out / "probability_std.tif", std)
print(f"wrote probability and spread rasters to {out}")
