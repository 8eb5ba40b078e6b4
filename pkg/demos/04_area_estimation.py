"""Estimate cashew area from a biased probability map, with a proper CI.

Counting the pixels a map labels cashew gives a biased area: commission and
omission errors rarely cancel. The design-based fix is to stratify the map,
draw a random reference sample inside each stratum, and re-weight the map
area by the sampled confusion rates. The estimate is unbiased no matter how
wrong the map is, and it comes with a defensible 95% confidence interval.

This demo synthesizes a deliberately miscalibrated probability raster over
a landscape whose true cashew area is known exactly, so the correction is
visible: the naive pixel count misses the census, the stratified estimate
brackets it.

Run from the repository root:  python3 demos/04_area_estimation.py
"""

from pathlib import Path

import numpy as np

from cropmap import synthetic
from cropmap.area import (
    AllocationPolicy,
    accuracies,
    allocate_samples,
    build_error_matrix,
    default_class_map,
    estimate_areas,
    fill_reference_from_truth,
    production_rollup,
    stratify,
    write_report,
    write_samples_csv,
)

out = Path(__file__).parent / "out" / "04_area_estimation"
out.mkdir(parents=True, exist_ok=True)

# step 1: a landscape with a known census
config = synthetic.SyntheticConfig(
    rows=1024, cols=1024,
    mixture={"Cashew": 0.3, "Forest Cover": 0.5, "Bare land": 0.2})
land = synthetic.generate_synthetic_landscape(config, seed=43)
cashew_code = land.schema.code("Cashew")
px_ha = land.grids[0].pixel_size ** 2 / 10_000.0
truth = land.mask == cashew_code
census_ha = truth.sum() * px_ha
print(f"true cashew area: {census_ha:.1f} ha")

# step 2: a noisy, miscalibrated probability map (a trained model would
# normally produce this; see demo 03); the noise pushes some forest into
# the map-cashew bins and some cashew out of them, so pixel counting
# goes wrong
rng = np.random.default_rng(44)
prob_values = np.clip(
    np.where(truth, 0.78, 0.16) + rng.normal(0.0, 0.18, truth.shape), 0.0, 1.0)
prob = land.grids[0].with_values(prob_values.astype(np.float32)[:, :, None])

# step 3: stratify; probability bins become strata, and pixels below the
# lowest bin fall back to their land-cover class as extra strata
landcover = synthetic.landcover_grid(land)
strata_grid, strat = stratify(prob, landcover)
occupied = [s for s in strat.strata if strat.weights[s.stratum_id] > 0]
print(f"{len(occupied)} occupied strata over {strat.total_area_ha:.0f} ha")

# step 4: spread a 600-unit sample budget over the strata; the default
# policy oversamples probability bins relative to land-cover strata
samples = allocate_samples(strat, strata_grid, budget=600,
                           policy=AllocationPolicy(min_per_stratum=20), seed=45)
write_samples_csv(out / "samples.csv", samples)
print(f"allocated {len(samples)} samples")

# step 5: label each sample; here the truth mask plays photo interpreter
samples = fill_reference_from_truth(samples, land.mask, positive_codes={cashew_code})

# step 6: tally the stratified error matrix and the accuracy figures
class_map = default_class_map(strat)
em = build_error_matrix(samples, strat, class_map)
overall, users, producers = accuracies(em)
print(f"overall accuracy: {overall:.3f}")

# the naive map area is the total weight of the map-cashew strata
naive_ha = sum(strat.weights[sid] for sid, name in class_map.items()
               if name == "cashew") * strat.total_area_ha
print(f"naive pixel-count area: {naive_ha:.1f} ha "
      f"(off by {naive_ha - census_ha:+.1f} ha)")

# step 7: the unbiased estimate with its 95% confidence interval
est = {e.class_name: e for e in estimate_areas(em, strat.total_area_ha)}["cashew"]
print(f"stratified estimate: {est.area_ha:.1f} ha "
      f"+/- {est.ci95_ha:.1f} ha (off by {est.area_ha - census_ha:+.1f} ha)")
covered = abs(est.area_ha - census_ha) <= est.ci95_ha
print(f"census inside the 95% interval: {covered}")

# step 8: turn areas into production figures; provinces with their own
# adopted statistics pass through unchanged next to modelled ones
records = production_rollup(
    estimates={"Demo Province": est},
    yields={"Demo Province": 1.5},
    accuracy_by_province={"Demo Province": overall},
    adopted={"Neighbor Province": {"area_ha": 542.0, "production_t": 759}})
write_report(out / "production.csv", out / "production.json", records)
for r in records:
    print(f"  {r.province:<17} {r.area_ha:9.1f} ha -> {r.production_t:6d} t ({r.source})")
print(f"wrote sample table and production report to {out}")
