"""Stratified sampling and unbiased area estimation from probability maps.

The probability map is cut into seven 10-point strata from 30% upward;
lower-probability pixels fall into landcover-derived strata. Samples drawn
per stratum are interpreted externally (CSV round-trip), tallied into an
error matrix, and turned into design-unbiased area estimates with standard
errors and 95% confidence intervals, plus overall/user's/producer's
accuracies. Province production rolls areas up against external yields.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .raster import RasterGrid

PROB_BIN_START = 0.30
PROB_BIN_WIDTH = 0.10
N_PROB_BINS = 7
LANDCOVER_STRATUM_BASE = 100
Z95 = 1.96

CASHEW_CLASS = "cashew"
OTHER_CLASS = "not-cashew"


@dataclass(frozen=True)
class Stratum:
    """One sampling stratum: a probability interval or a landcover category."""

    stratum_id: int
    definition: str
    pixel_count: int


@dataclass(frozen=True)
class Stratification:
    """The full stratum list with derived weights."""

    strata: tuple[Stratum, ...]
    pixel_area_ha: float
    total_area_ha: float

    def __post_init__(self):
        ids = [s.stratum_id for s in self.strata]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate stratum ids")
        count = sum(s.pixel_count for s in self.strata)
        expect = self.total_area_ha / self.pixel_area_ha
        if abs(count - expect) > 0.5:
            raise DataError(f"stratum pixel counts sum to {count}, "
                            f"but total area implies {expect:.1f} pixels")

    @property
    def weights(self) -> dict[int, float]:
        total = sum(s.pixel_count for s in self.strata)
        return {s.stratum_id: s.pixel_count / total for s in self.strata}

    def stratum(self, stratum_id: int) -> Stratum:
        for s in self.strata:
            if s.stratum_id == stratum_id:
                return s
        raise DataError(f"unknown stratum id {stratum_id}")


@dataclass(frozen=True)
class SampleUnit:
    """One sampled pixel awaiting (or carrying) its reference label."""

    sample_id: str
    row: int
    col: int
    x: float
    y: float
    stratum_id: int
    reference_label: str | None = None


@dataclass(frozen=True)
class AllocationPolicy:
    """Per-stratum sampling intensity relative to proportional allocation."""

    prob_bin_multiplier: float = 2.0
    landcover_multiplier: float = 0.5
    overrides: dict = field(default_factory=dict)
    min_per_stratum: int = 30

    def multiplier(self, stratum_id: int) -> float:
        if stratum_id in self.overrides:
            return float(self.overrides[stratum_id])
        if stratum_id >= LANDCOVER_STRATUM_BASE:
            return self.landcover_multiplier
        return self.prob_bin_multiplier


@dataclass(frozen=True)
class ErrorMatrix:
    """Sample counts by map stratum (rows) and reference class (columns)."""

    stratum_ids: tuple[int, ...]
    reference_classes: tuple[str, ...]
    counts: np.ndarray
    weights: dict
    map_classes: dict
    warnings: tuple[str, ...] = ()

    def row_total(self, stratum_id: int) -> int:
        return int(self.counts[self.stratum_ids.index(stratum_id)].sum())


@dataclass(frozen=True)
class AreaEstimate:
    """Design-based estimate for one reference class."""

    class_name: str
    proportion: float
    area_ha: float
    standard_error_ha: float
    ci95_ha: float


@dataclass(frozen=True)
class ProvinceRecord:
    """One Table-style province row of the production report."""

    province: str
    accuracy: float | None
    area_ha: float
    area_ci_ha: float | None
    yield_t_per_ha: float | None
    production_t: int
    production_ci_t: int | None
    source: str = "modelled"


def prob_bin_edges() -> list[tuple[float, float]]:
    """The seven probability intervals [0.30,0.40) ... [0.90,1.00]."""
    return [(round(PROB_BIN_START + i * PROB_BIN_WIDTH, 10),
             round(PROB_BIN_START + (i + 1) * PROB_BIN_WIDTH, 10))
            for i in range(N_PROB_BINS)]


def stratify(prob: RasterGrid, landcover: RasterGrid) -> tuple[RasterGrid, Stratification]:
    """Assign every valid pixel to a probability bin or a landcover stratum.

    Probability bins get ids 1..7; landcover strata get 100 + category code.
    Nodata probability pixels get stratum 0 and are excluded from weights.
    """
    if (prob.rows, prob.cols) != (landcover.rows, landcover.cols) or \
            (prob.origin_x, prob.origin_y) != (landcover.origin_x, landcover.origin_y) or \
            abs(prob.pixel_size - landcover.pixel_size) > 1e-9:
        raise DataError("stratify requires the landcover aligned to the probability map")
    p = prob.band(0)
    valid = np.ones(p.shape, dtype=bool)
    if prob.nodata is not None:
        valid = p != prob.nodata
    if not valid.any():
        raise DataError("probability raster has no valid pixels")

    strata_map = np.zeros(p.shape, dtype=np.int32)
    strata: list[Stratum] = []
    for i, (lo, hi) in enumerate(prob_bin_edges(), start=1):
        if i == N_PROB_BINS:
            member = valid & (p >= lo) & (p <= hi)
            definition = f"prob [{lo:.2f},{hi:.2f}]"
        else:
            member = valid & (p >= lo) & (p < hi)
            definition = f"prob [{lo:.2f},{hi:.2f})"
        strata_map[member] = i
        strata.append(Stratum(i, definition, int(member.sum())))

    low = valid & (p < PROB_BIN_START)
    lc = landcover.band(0).astype(np.int64)
    for code in sorted(np.unique(lc[low])) if low.any() else []:
        member = low & (lc == code)
        sid = LANDCOVER_STRATUM_BASE + int(code)
        strata_map[member] = sid
        strata.append(Stratum(sid, f"landcover:{int(code)}", int(member.sum())))

    pixel_area_ha = prob.pixel_size ** 2 / 10_000.0
    total_area_ha = float(valid.sum()) * pixel_area_ha
    strat = Stratification(strata=tuple(strata), pixel_area_ha=pixel_area_ha,
                           total_area_ha=total_area_ha)
    grid = RasterGrid.create(strata_map, origin_x=prob.origin_x, origin_y=prob.origin_y,
                             pixel_size=prob.pixel_size, crs_id=prob.crs_id)
    return grid, strat


def _largest_remainder(shares: dict[int, float], budget: int) -> dict[int, int]:
    floors = {sid: int(math.floor(v)) for sid, v in shares.items()}
    remaining = budget - sum(floors.values())
    # ties broken by lower stratum id for determinism
    order = sorted(shares, key=lambda sid: (-(shares[sid] - floors[sid]), sid))
    for sid in order[:remaining]:
        floors[sid] += 1
    return floors


def allocate_samples(strat: Stratification, strata_grid: RasterGrid, budget: int,
                     policy: AllocationPolicy, seed: int) -> list[SampleUnit]:
    """Draw per-stratum pixel samples under the allocation policy.

    Quotas are proportional to weight x multiplier (largest-remainder
    rounding), floored at the policy minimum; pixels are then drawn uniformly
    without replacement within each stratum, in stratum-id order.
    """
    nonempty = [s for s in strat.strata if s.pixel_count > 0]
    if not nonempty:
        raise DataError("no nonempty strata to sample")
    min_needed = policy.min_per_stratum * len(nonempty)
    if budget < min_needed:
        raise ConfigError(f"budget {budget} below the minimum "
                          f"{policy.min_per_stratum} x {len(nonempty)} strata = {min_needed}")

    weights = strat.weights
    scores = {s.stratum_id: weights[s.stratum_id] * policy.multiplier(s.stratum_id)
              for s in nonempty}
    total_score = sum(scores.values())
    shares = {sid: budget * v / total_score for sid, v in scores.items()}
    quotas = _largest_remainder(shares, budget)

    # lift small quotas to the minimum, paying from the largest quotas
    short = {sid for sid, q in quotas.items() if q < policy.min_per_stratum}
    for sid in sorted(short):
        need = policy.min_per_stratum - quotas[sid]
        quotas[sid] = policy.min_per_stratum
        donors = sorted(quotas, key=lambda d: (-quotas[d], d))
        for donor in donors:
            if need == 0:
                break
            if donor == sid or quotas[donor] <= policy.min_per_stratum:
                continue
            give = min(need, quotas[donor] - policy.min_per_stratum)
            quotas[donor] -= give
            need -= give
        if need:
            raise ConfigError("budget cannot satisfy the per-stratum minimum")

    for s in nonempty:
        if quotas[s.stratum_id] > s.pixel_count:
            raise DataError(f"stratum {s.stratum_id} has {s.pixel_count} pixels, "
                            f"smaller than its quota {quotas[s.stratum_id]}")

    rng = np.random.default_rng(seed)
    smap = strata_grid.band(0)
    samples: list[SampleUnit] = []
    counter = 0
    for s in sorted(nonempty, key=lambda s: s.stratum_id):
        flat = np.flatnonzero(smap == s.stratum_id)
        picks = rng.choice(flat, size=quotas[s.stratum_id], replace=False)
        for p in np.sort(picks):
            row, col = divmod(int(p), strata_grid.cols)
            x, y = strata_grid.pixel_center(row, col)
            samples.append(SampleUnit(sample_id=f"s{counter:06d}", row=row, col=col,
                                      x=x, y=y, stratum_id=s.stratum_id))
            counter += 1
    return samples


def default_class_map(strat: Stratification, cashew_min_stratum: int = 1) -> dict[int, str]:
    """Map each stratum to its map class: probability bins are cashew."""
    out = {}
    for s in strat.strata:
        is_bin = 1 <= s.stratum_id <= N_PROB_BINS
        out[s.stratum_id] = CASHEW_CLASS if is_bin and s.stratum_id >= cashew_min_stratum \
            else OTHER_CLASS
    return out


def build_error_matrix(samples: list[SampleUnit], strat: Stratification,
                       class_map: dict[int, str]) -> ErrorMatrix:
    """Tally interpreted samples into stratum x reference-class counts."""
    for s in samples:
        if s.reference_label is None or s.reference_label == "":
            raise DataError(f"sample {s.sample_id} is uninterpreted")
        if s.stratum_id not in class_map:
            raise DataError(f"sample {s.sample_id} claims unknown stratum {s.stratum_id}")
    weights = strat.weights
    stratum_ids = tuple(s.stratum_id for s in strat.strata)
    classes = tuple(sorted({s.reference_label for s in samples} |
                           set(class_map.values())))
    counts = np.zeros((len(stratum_ids), len(classes)), dtype=np.int64)
    for s in samples:
        counts[stratum_ids.index(s.stratum_id), classes.index(s.reference_label)] += 1
    warnings = tuple(f"stratum {sid} has weight {weights[sid]:.6f} but no samples"
                     for sid, row in zip(stratum_ids, counts)
                     if row.sum() == 0 and weights[sid] > 0)
    return ErrorMatrix(stratum_ids=stratum_ids, reference_classes=classes,
                       counts=counts, weights=dict(weights),
                       map_classes=dict(class_map), warnings=warnings)


def _check_rows(em: ErrorMatrix) -> list[int]:
    """Indices of rows that carry weight; error if any lacks 2 samples."""
    rows = []
    for i, sid in enumerate(em.stratum_ids):
        w = em.weights.get(sid, 0.0)
        n = em.counts[i].sum()
        if w > 0:
            if n < 2:
                raise DataError(f"stratum {sid} has weight {w:.6f} but only "
                                f"{n} samples; need at least 2")
            rows.append(i)
    return rows


def estimate_areas(em: ErrorMatrix, total_area_ha: float) -> list[AreaEstimate]:
    """Stratified design-based class proportions, areas, SEs, and 95% CIs."""
    rows = _check_rows(em)
    out = []
    for k, cls in enumerate(em.reference_classes):
        p_hat = 0.0
        var = 0.0
        for i in rows:
            sid = em.stratum_ids[i]
            w = em.weights[sid]
            n_i = em.counts[i].sum()
            share = em.counts[i, k] / n_i
            p_hat += w * share
            var += w ** 2 * share * (1.0 - share) / (n_i - 1)
        se = math.sqrt(var)
        out.append(AreaEstimate(class_name=cls, proportion=p_hat,
                                area_ha=p_hat * total_area_ha,
                                standard_error_ha=se * total_area_ha,
                                ci95_ha=Z95 * se * total_area_ha))
    return out


def accuracies(em: ErrorMatrix) -> tuple[float, dict[int, float], dict[str, float]]:
    """(overall, user's per stratum, producer's per reference class)."""
    rows = _check_rows(em)
    overall = 0.0
    users: dict[int, float] = {}
    class_p = {cls: 0.0 for cls in em.reference_classes}
    class_correct = {cls: 0.0 for cls in em.reference_classes}
    for i in rows:
        sid = em.stratum_ids[i]
        w = em.weights[sid]
        n_i = em.counts[i].sum()
        map_cls = em.map_classes[sid]
        if map_cls not in em.reference_classes:
            raise DataError(f"stratum {sid} maps to class {map_cls!r} absent from "
                            "the reference classes")
        agree = em.counts[i, em.reference_classes.index(map_cls)] / n_i
        users[sid] = agree
        overall += w * agree
        class_correct[map_cls] += w * agree
        for k, cls in enumerate(em.reference_classes):
            class_p[cls] += w * em.counts[i, k] / n_i
    producers = {cls: (class_correct[cls] / class_p[cls] if class_p[cls] > 0 else 0.0)
                 for cls in em.reference_classes}
    return overall, users, producers


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def production_rollup(estimates: dict[str, AreaEstimate],
                      yields: dict[str, float],
                      accuracy_by_province: dict[str, float] | None = None,
                      adopted: dict[str, dict] | None = None) -> list[ProvinceRecord]:
    """Province production rows plus a totals row.

    Modelled provinces compute production = area x yield (rounded to whole
    tons) with the CI scaled by yield; adopted provinces pass external
    records through with no CI. The totals row sums areas and productions.
    """
    accuracy_by_province = accuracy_by_province or {}
    adopted = adopted or {}
    records = []
    for province, est in estimates.items():
        if province in adopted:
            raise ConfigError(f"province {province!r} is both modelled and adopted")
        y = yields.get(province)
        if y is None or y <= 0:
            raise ConfigError(f"missing or non-positive yield for province {province!r}")
        records.append(ProvinceRecord(
            province=province,
            accuracy=accuracy_by_province.get(province),
            area_ha=est.area_ha,
            area_ci_ha=est.ci95_ha,
            yield_t_per_ha=y,
            production_t=_round_half_up(est.area_ha * y),
            production_ci_t=_round_half_up(est.ci95_ha * y),
            source="modelled",
        ))
    for province, rec in adopted.items():
        records.append(ProvinceRecord(
            province=province,
            accuracy=None,
            area_ha=float(rec.get("area_ha", 0.0)),
            area_ci_ha=None,
            yield_t_per_ha=rec.get("yield_t_per_ha"),
            production_t=int(rec["production_t"]),
            production_ci_t=None,
            source="PDAFF-adopted",
        ))
    total_area = sum(r.area_ha for r in records)
    total_prod = sum(r.production_t for r in records)
    ci_parts = [r for r in records if r.area_ci_ha is not None]
    total_area_ci = sum(r.area_ci_ha for r in ci_parts) if ci_parts else None
    prod_ci_parts = [r for r in records if r.production_ci_t is not None]
    total_prod_ci = sum(r.production_ci_t for r in prod_ci_parts) if prod_ci_parts else None
    records.append(ProvinceRecord(
        province="Total", accuracy=None, area_ha=total_area,
        area_ci_ha=total_area_ci, yield_t_per_ha=None,
        production_t=total_prod, production_ci_t=total_prod_ci, source="total"))
    return records


# -- sample interpretation helpers and file formats -------------------------

def fill_reference_from_truth(samples: list[SampleUnit], truth_mask: np.ndarray,
                              positive_codes: set[int]) -> list[SampleUnit]:
    """Label samples from a census truth mask (the interpreter stand-in)."""
    out = []
    for s in samples:
        code = int(truth_mask[s.row, s.col])
        label = CASHEW_CLASS if code in positive_codes else OTHER_CLASS
        out.append(replace(s, reference_label=label))
    return out


SAMPLE_HEADER = ["id", "row", "col", "lon", "lat", "stratum_id", "reference_label"]


def write_samples_csv(path, samples: list[SampleUnit]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SAMPLE_HEADER)
        for s in samples:
            writer.writerow([s.sample_id, s.row, s.col,
                             f"{s.x:.3f}", f"{s.y:.3f}", s.stratum_id,
                             s.reference_label or ""])


def read_samples_csv(path) -> list[SampleUnit]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing samples CSV: {p}")
    out = []
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SAMPLE_HEADER:
            raise DataError(f"samples CSV header must be {','.join(SAMPLE_HEADER)}: {p}")
        for line in reader:
            if not line:
                continue
            out.append(SampleUnit(sample_id=line[0], row=int(line[1]), col=int(line[2]),
                                  x=float(line[3]), y=float(line[4]),
                                  stratum_id=int(line[5]),
                                  reference_label=line[6] or None))
    return out


def stratification_to_json(strat: Stratification) -> dict:
    return {
        "pixel_area_ha": strat.pixel_area_ha,
        "total_area_ha": strat.total_area_ha,
        "strata": [{"id": s.stratum_id, "definition": s.definition,
                    "pixel_count": s.pixel_count,
                    "weight": strat.weights[s.stratum_id]} for s in strat.strata],
    }


def stratification_from_json(doc: dict) -> Stratification:
    return Stratification(
        strata=tuple(Stratum(s["id"], s["definition"], s["pixel_count"])
                     for s in doc["strata"]),
        pixel_area_ha=doc["pixel_area_ha"],
        total_area_ha=doc["total_area_ha"],
    )


def write_report(path_csv, path_json, records: list[ProvinceRecord]) -> None:
    """Write the province report as CSV and JSON."""
    rows = []
    for r in records:
        rows.append({
            "province": r.province,
            "accuracy_pct": None if r.accuracy is None else round(100 * r.accuracy, 2),
            "area_ha": round(r.area_ha, 1),
            "area_ci95_ha": None if r.area_ci_ha is None else round(r.area_ci_ha, 1),
            "yield_t_per_ha": r.yield_t_per_ha,
            "production_t": r.production_t,
            "production_ci95_t": r.production_ci_t,
            "source": r.source,
        })
    with open(path_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    Path(path_json).write_text(json.dumps(rows, indent=2) + "\n")
