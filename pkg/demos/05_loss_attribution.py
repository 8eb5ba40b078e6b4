"""Attribute historical forest loss to present-day cashew probability.

Annual binary loss rasters collapse into a single first-loss-year raster
(earliest year wins). Crossing that against the probability strata of the
current cashew map answers two questions per year: where did the cleared
land end up on the probability scale, and what share of all clearing sits
in map-cashew today. A stand-age histogram from the label polygons rounds
out the picture of when plantations were established.

Run from the repository root:  python3 demos/05_loss_attribution.py
"""

from pathlib import Path

import numpy as np

from cropmap import synthetic
from cropmap.area import stratify
from cropmap.attribution import (
    age_histogram,
    cashew_loss_share,
    cross_tab,
    first_loss_year,
    render_attribution_chart,
    write_age_csv,
    write_attribution_csv,
)

out = Path(__file__).parent / "out" / "05_loss_attribution"
out.mkdir(parents=True, exist_ok=True)

# step 1: a landscape plus a probability map stratified as in demo 04
config = synthetic.SyntheticConfig(
    rows=512, cols=512,
    mixture={"Cashew": 0.4, "Forest Cover": 0.4, "Bare land": 0.2})
land = synthetic.generate_synthetic_landscape(config, seed=43)
truth = land.mask == land.schema.code("Cashew")
rng = np.random.default_rng(44)
prob_values = np.clip(
    np.where(truth, 0.8, 0.15) + rng.normal(0.0, 0.1, truth.shape), 0.0, 1.0)
prob = land.grids[0].with_values(prob_values.astype(np.float32)[:, :, None])
strata_grid, _ = stratify(prob, synthetic.landcover_grid(land))

# step 2: fake an annual loss archive; each cashew stand was cleared from
# forest age_years ago, so its loss year follows from the stand age
this_year = 2022
loss_year = np.zeros(truth.shape, dtype=np.int32)
for p in land.polygons:
    if p.category != "Cashew":
        continue
    xmin, ymin, xmax, ymax = p.geometry.bounds
    g = land.grids[0]
    c0 = int(round((xmin - g.origin_x) / g.pixel_size))
    c1 = int(round((xmax - g.origin_x) / g.pixel_size))
    r0 = int(round((g.origin_y - ymax) / g.pixel_size))
    r1 = int(round((g.origin_y - ymin) / g.pixel_size))
    loss_year[r0:r1, c0:c1] = max(2001, this_year - int(p.age_years))

years = sorted(int(y) for y in np.unique(loss_year) if y > 0)
annual = [land.grids[0].with_values((loss_year == y).astype(np.uint8)[:, :, None])
          for y in years]
print(f"annual archive: {len(years)} years with clearing, {years[0]}..{years[-1]}")

# step 3: collapse the annual stack; the earliest flagged year wins per pixel
collapsed = first_loss_year(annual, years)
lost = collapsed.band() > 0
print(f"{lost.sum()} px cleared at some point ({100 * lost.mean():.1f}% of the scene)")

# step 4: cross-tabulate loss year against today's probability strata; every
# non-empty row shows where that year's clearing sits on the map now
table = cross_tab(strata_grid, collapsed)
write_attribution_csv(out / "attribution.csv", table)
busy = [y for y in table.years if y not in table.empty_years]
print(f"attribution rows: {len(busy)} non-empty years (of {len(table.years)})")

# since clearing only ever happened where cashew stands are today, the
# cashew share of each year's loss should be close to 100%
shares = [table.shares[y] for y in busy if y != "no loss"]
print(f"cashew share of annual loss: min {min(shares):.1f}%, max {max(shares):.1f}%")

# the same percentages are available standalone, keyed by year; years
# with no clearing at all report 0
share = cashew_loss_share(strata_grid, collapsed)
active = [v for v in share.values() if v > 0]
print(f"standalone share series: {len(active)} active years, "
      f"all at {min(active):.1f}%")

# step 5: a stacked-bar chart of the table, one bar per year
render_attribution_chart(out / "attribution.png", table)

# step 6: stand-age histograms from the label polygons, split by region
g = land.grids[0]
midline = g.origin_x + g.cols * g.pixel_size / 2
cashew = [p for p in land.polygons if p.category == "Cashew"]
groups = ["west" if p.geometry.centroid.x < midline else "east" for p in cashew]
hist = age_histogram(cashew, groups)
write_age_csv(out / "ages.csv", hist)
for name, counts in sorted(hist.items()):
    n = sum(counts.values())
    top = max(counts, key=counts.get)
    print(f"  {name}: {n} stands, commonest age {top} years")
print(f"wrote attribution table, chart, and age histogram to {out}")
