"""Forest-loss attribution against cashew probability strata and age profiles.

Annual binary loss rasters reduce to a first-loss-year map; that map is
cross-tabulated against the probability strata (each year's category counts
normalized to 100%), and a per-year series reports the share of all loss
falling inside cashew strata. Age histograms come straight from polygon
attributes; the underlying polygons are digitized labels, not a randomized
sample, so the histograms describe the dataset rather than the population.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .raster import RasterGrid

YEAR_MIN = 2000
YEAR_MAX = 2022
NO_LOSS = 0
CASHEW_STRATA = tuple(range(1, 8))


@dataclass(frozen=True)
class LossAttributionTable:
    """Year x probability-category percentages plus the cashew-share series.

    ``percentages[y]`` holds one value per category and sums to 100 for every
    year with any counted pixel; empty years stay all-zero and are listed in
    ``empty_years``.
    """

    years: tuple[int | str, ...]
    categories: tuple[int, ...]
    counts: dict
    percentages: dict
    shares: dict
    empty_years: tuple = ()
    flagged_share_years: tuple = ()


def _require_alignment(a: RasterGrid, b: RasterGrid, what: str) -> None:
    if (a.rows, a.cols) != (b.rows, b.cols) or \
            (a.origin_x, a.origin_y) != (b.origin_x, b.origin_y) or \
            abs(a.pixel_size - b.pixel_size) > 1e-9:
        raise DataError(f"{what} requires aligned rasters")


def first_loss_year(annual_loss: list[RasterGrid], years: list[int]) -> RasterGrid:
    """Reduce a stack of binary yearly rasters to the earliest loss year.

    Pixels never flagged get the no-loss sentinel 0.
    """
    if len(annual_loss) != len(years):
        raise DataError(f"{len(annual_loss)} rasters but {len(years)} years")
    if not annual_loss:
        raise DataError("empty annual loss stack")
    if list(years) != sorted(years) or len(set(years)) != len(years):
        raise DataError("years must be strictly increasing")
    for y in years:
        if not YEAR_MIN <= y <= YEAR_MAX:
            raise DataError(f"year {y} outside {YEAR_MIN}..{YEAR_MAX}")
    base = annual_loss[0]
    out = np.full((base.rows, base.cols), NO_LOSS, dtype=np.int32)
    for grid, year in zip(annual_loss, years):
        _require_alignment(base, grid, "first_loss_year")
        flag = grid.band(0)
        bad = sorted(int(v) for v in np.unique(flag) if v not in (0, 1))
        if bad:
            raise DataError(f"loss raster for {year} is not binary: found {bad}")
        hit = (flag == 1) & (out == NO_LOSS)
        out[hit] = year
    return RasterGrid.create(out, origin_x=base.origin_x, origin_y=base.origin_y,
                             pixel_size=base.pixel_size, crs_id=base.crs_id)


def _year_rows(loss_band: np.ndarray):
    for year in range(YEAR_MIN, YEAR_MAX + 1):
        yield year, loss_band == year
    yield "no loss", loss_band == NO_LOSS


def cross_tab(prob_strata: RasterGrid, loss: RasterGrid,
              categories: tuple[int, ...] = CASHEW_STRATA) -> LossAttributionTable:
    """Percent of each year's cashew-strata loss falling in each category.

    Only pixels inside the given probability categories are counted; each
    year row is normalized to 100%.
    """
    _require_alignment(prob_strata, loss, "cross_tab")
    strata = prob_strata.band(0)
    loss_band = loss.band(0)
    in_category = {c: strata == c for c in categories}
    counts: dict = {}
    percentages: dict = {}
    empty = []
    for year, member in _year_rows(loss_band):
        row = np.array([int((member & in_category[c]).sum()) for c in categories],
                       dtype=np.int64)
        counts[year] = row
        total = row.sum()
        if total == 0:
            percentages[year] = np.zeros(len(categories))
            empty.append(year)
        else:
            percentages[year] = 100.0 * row / total
    shares, flagged = _share_series(strata, loss_band, categories)
    return LossAttributionTable(
        years=tuple(counts.keys()), categories=tuple(categories),
        counts=counts, percentages=percentages, shares=shares,
        empty_years=tuple(empty), flagged_share_years=tuple(flagged))


def _share_series(strata: np.ndarray, loss_band: np.ndarray, cashew_strata):
    cashew = np.isin(strata, np.asarray(list(cashew_strata)))
    shares = {}
    flagged = []
    for year in range(YEAR_MIN, YEAR_MAX + 1):
        member = loss_band == year
        total = int(member.sum())
        if total == 0:
            shares[year] = 0.0
            flagged.append(year)
        else:
            shares[year] = 100.0 * int((member & cashew).sum()) / total
    return shares, flagged


def cashew_loss_share(prob_strata: RasterGrid, loss: RasterGrid,
                      cashew_strata: tuple[int, ...] = CASHEW_STRATA) -> dict:
    """Per-year percentage of all loss pixels lying inside cashew strata.

    Years with no loss at all report 0 (they are flagged in cross_tab).
    """
    _require_alignment(prob_strata, loss, "cashew_loss_share")
    shares, _ = _share_series(prob_strata.band(0), loss.band(0), cashew_strata)
    return shares


def age_histogram(polygons, groups: list[str]) -> dict[str, dict[int, int]]:
    """Integer-binned cashew age counts per group.

    ``groups`` assigns a group label to each polygon by position; non-cashew
    polygons are skipped. The counts describe the digitized polygons, not a
    randomized field sample.
    """
    if len(groups) != len(polygons):
        raise DataError(f"{len(polygons)} polygons but {len(groups)} group labels")
    out: dict[str, dict[int, int]] = {}
    for poly, group in zip(polygons, groups):
        out.setdefault(group, {})
        if poly.category != "Cashew" or poly.age_years is None:
            continue
        age_bin = int(np.floor(poly.age_years))
        out[group][age_bin] = out[group].get(age_bin, 0) + 1
    return out


def write_attribution_csv(path, table: LossAttributionTable) -> None:
    """Year rows with per-category percentages plus the cashew-share column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["year"] + [f"stratum_{c}_pct" for c in table.categories]
                        + ["cashew_share_pct"])
        for year in table.years:
            share = table.shares.get(year, "") if isinstance(year, int) else ""
            writer.writerow([year]
                            + [f"{v:.6f}" for v in table.percentages[year]]
                            + ([f"{share:.6f}"] if share != "" else [""]))


def write_age_csv(path, histograms: dict[str, dict[int, int]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "age_years", "count"])
        for group in sorted(histograms):
            for age in sorted(histograms[group]):
                writer.writerow([group, age, histograms[group][age]])


def render_attribution_chart(path, table: LossAttributionTable) -> None:
    """Stacked percentage bars per year with the cashew-share line overlaid."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    years = [y for y in table.years if isinstance(y, int) and y not in table.empty_years]
    if not years:
        raise DataError("nothing to chart: every year is empty")
    fig, ax = plt.subplots(figsize=(10, 5))
    bottom = np.zeros(len(years))
    for i, cat in enumerate(table.categories):
        vals = np.array([table.percentages[y][i] for y in years])
        ax.bar(years, vals, bottom=bottom, label=f"stratum {cat}")
        bottom += vals
    ax2 = ax.twinx()
    ax2.plot(years, [table.shares[y] for y in years], color="black", marker="o",
             label="cashew share of all loss")
    ax.set_xlabel("first loss year")
    ax.set_ylabel("share within cashew strata (%)")
    ax2.set_ylabel("cashew share of total loss (%)")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
