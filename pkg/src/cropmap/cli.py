"""Command-line pipeline: synth -> build-dataset -> train -> infer -> stratify
-> allocate -> estimate -> rollup, plus attribute and ages.

Every command reads one YAML config (flags override config values), writes
its artifacts under the config's out_dir, and drops a run manifest there.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, area, attribution, config as config_mod, inference, labels, model as model_mod, patches as patches_mod, synthetic, train as train_mod
from .errors import ConfigError, CropmapError, DataError, NumericError
from .manifest import write_run_manifest
from .raster import read_raster, write_raster

log = logging.getLogger("cropmap")


def _load(args, overrides: dict | None = None) -> config_mod.PipelineConfig:
    path = getattr(args, "inputs", None) or args.config
    return config_mod.load_config(path, overrides=overrides)


def _schema(cfg) -> labels.CategorySchema:
    path = cfg.path("schema")
    if path is None:
        fallback = cfg.out_dir() / "schema.csv"
        if fallback.exists():
            return labels.load_schema(fallback)
        return labels.CategorySchema.default()
    return labels.load_schema(path)


def _imagery(cfg) -> list:
    try:
        paths = cfg.imagery_paths()
    except ConfigError:
        paths = [cfg.out_dir() / f"level{i}.tif" for i in range(4)]
        if not all(p.exists() for p in paths):
            raise ConfigError("missing required config key: paths.imagery "
                              "(and no synth outputs found in out_dir)")
    return [read_raster(p) for p in paths], paths


def _polygons_path(cfg) -> Path:
    path = cfg.path("polygons")
    if path is None:
        path = cfg.out_dir() / "labels.geojson"
        if not path.exists():
            raise ConfigError("missing required config key: paths.polygons")
    return path


def _optional_path(cfg, key: str, default_name: str) -> Path:
    path = cfg.path(key)
    if path is None:
        path = cfg.out_dir() / default_name
        if not path.exists():
            raise ConfigError(f"missing required config key: paths.{key}")
    return path


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load(args)
    syn = dict(cfg.section("synth"))
    syn["band_counts"] = tuple(cfg.section("model")["input_channels"])
    sc = synthetic.SyntheticConfig(**syn)
    seed = cfg.section("seeds")["synth"]
    land = synthetic.generate_synthetic_landscape(sc, seed=seed)
    out = cfg.out_dir()
    outputs = []
    for i, grid in enumerate(land.grids):
        p = out / f"level{i}.tif"
        write_raster(p, grid)
        outputs.append(p)
    lc = out / "landcover.tif"
    write_raster(lc, synthetic.landcover_grid(land))
    outputs.append(lc)
    labels.save_polygons(out / "labels.geojson", list(land.polygons), crs_id=sc.crs_id)
    labels.save_schema(out / "schema.csv", land.schema)
    outputs += [out / "labels.geojson", out / "schema.csv"]
    log.info("synth: %d polygons over %dx%d px", len(land.polygons), sc.rows, sc.cols)
    write_run_manifest(out, "synth", cfg.data, inputs=[], outputs=outputs)
    return 0


def cmd_build_dataset(args) -> int:
    cfg = _load(args)
    grids, imagery_paths = _imagery(cfg)
    poly_path = _polygons_path(cfg)
    polys = labels.load_polygons(poly_path)
    schema = _schema(cfg)
    ds = cfg.section("dataset")
    seed = cfg.section("seeds")["patches"]

    mask = labels.rasterize(polys, grids[0], schema)
    stacks = patches_mod.sample_patches(grids, mask, ds["n_patches"], seed=seed)
    if ds["augment_per_patch"]:
        extra = []
        for i, p in enumerate(stacks):
            for j in range(ds["augment_per_patch"]):
                extra.append(patches_mod.augment(p, 1 + (i + j) % 7))
        stacks = stacks + extra
    out = cfg.out_dir()
    cache1 = out / "patches_phase1.npz"
    patches_mod.write_cache(cache1, stacks, schema, seed=seed)

    phase2 = patches_mod.filter_phase2(stacks, polys, min_age=ds["min_age"],
                                       min_fraction=ds["min_fraction"])
    outputs = [cache1, cache1.with_suffix(".npz.json")]
    if phase2:
        cache2 = out / "patches_phase2.npz"
        patches_mod.write_cache(cache2, phase2, schema, seed=seed)
        outputs += [cache2, cache2.with_suffix(".npz.json")]
    else:
        log.warning("no patches qualified for phase 2")
    log.info("dataset: %d phase-1 patches, %d phase-2 patches", len(stacks), len(phase2))
    write_run_manifest(out, "build-dataset", cfg.data,
                       inputs=list(imagery_paths) + [poly_path], outputs=outputs)
    return 0


def _train_cfg(cfg, phase: int) -> train_mod.TrainConfig:
    t = cfg.section("train")
    return train_mod.TrainConfig(phase=phase, seed=cfg.section("seeds")["train"], **t)


def cmd_train(args) -> int:
    cfg = _load(args)
    out = cfg.out_dir()
    schema = _schema(cfg)
    schema_hash = patches_mod._schema_hash(schema)
    phase = args.phase
    tc = _train_cfg(cfg, phase)
    cache = out / f"patches_phase{phase}.npz"
    if not cache.exists():
        raise DataError(f"missing patch cache: {cache} (run build-dataset first)")
    stacks, _ = patches_mod.read_cache(cache)
    tr, va = train_mod.split_by_square(stacks, tc.val_fraction, seed=tc.seed)

    if phase == 1:
        mc = dict(cfg.section("model"))
        mc["input_channels"] = tuple(mc["input_channels"])
        mc["base_channels"] = tuple(mc["base_channels"])
        m = model_mod.build_model(model_mod.ModelConfig(**mc), seed=tc.seed)
        m, history = train_mod.train_phase1(m, tr, va, tc)
    else:
        init = Path(args.init) if args.init else out / "phase1.ckpt"
        m, _meta = model_mod.load_checkpoint(init)
        m, history = train_mod.train_phase2(m, tr, va, tc)

    ckpt = out / f"phase{phase}.ckpt"
    model_mod.save_checkpoint(ckpt, m, schema_hash=schema_hash, phase=phase)
    metrics = out / f"metrics_phase{phase}.csv"
    train_mod.write_metrics_csv(metrics, history)
    best = min((h for h in history if h["split"] == "val"), key=lambda h: h["loss"])
    log.info("phase %d: best val loss %.4f (epoch %d), f1 %.4f",
             phase, best["loss"], best["epoch"], best["f1"])
    write_run_manifest(out, f"train-phase{phase}", cfg.data,
                       inputs=[cache], outputs=[metrics, ckpt])
    return 0


def cmd_infer(args) -> int:
    overrides = {"inference": {}}
    for flag, key in (("stride", "stride"), ("mc_runs", "mc_runs"),
                      ("dropout", "dropout")):
        value = getattr(args, flag)
        if value is not None:
            overrides["inference"][key] = value
    cfg = _load(args, overrides=overrides)
    out = cfg.out_dir()
    inf = cfg.section("inference")
    if inf["stride"] % 8:
        raise ConfigError(f"inference stride must be a multiple of 8, got {inf['stride']}")
    grids, imagery_paths = _imagery(cfg)
    ckpt = Path(args.model) if args.model else out / "phase2.ckpt"
    m, _meta = model_mod.load_checkpoint(ckpt)
    if m.head_kind != model_mod.SIGMOID:
        raise DataError(f"checkpoint {ckpt} does not carry a sigmoid head")

    plan = inference.plan_tiles(grids[0], stride=inf["stride"], margin=inf["margin"])
    det = inference.predict_deterministic(m, grids, plan, batch_size=inf["batch_size"])
    seed = cfg.section("seeds")["mc"]
    if inf["mc_runs"] > 0:
        mc_mean, std = inference.predict_mc(m, grids, plan, k=inf["mc_runs"],
                                            rate=inf["dropout"], seed=seed,
                                            batch_size=inf["batch_size"])
        final = inference.combine(det, mc_mean, rule=inf["combine"])
    else:
        std = None
        final = det

    suppress = args.suppress.split(",") if args.suppress else inf["suppress"]
    lc_path = Path(args.landcover) if args.landcover else cfg.path("landcover")
    inputs = list(imagery_paths) + [ckpt]
    if suppress:
        if lc_path is None:
            lc_path = out / "landcover.tif"
        if not lc_path.exists():
            raise ConfigError("suppression requested but no landcover raster given "
                              "(paths.landcover or --landcover)")
        schema = _schema(cfg)
        codes = [schema.code(name.strip()) for name in suppress]
        final = inference.clean_with_landcover(final, read_raster(lc_path), codes)
        inputs.append(lc_path)

    inference.validate_probability(final)
    prob_path = Path(args.out) if args.out else out / "probability.tif"
    write_raster(prob_path, final)
    outputs = [prob_path]
    if std is not None and args.std_out:
        write_raster(Path(args.std_out), std)
        outputs.append(Path(args.std_out))
    log.info("infer: wrote %s (%d tiles, stride %d)", prob_path,
             len(plan.windows), inf["stride"])
    write_run_manifest(out, "infer", cfg.data, inputs=inputs, outputs=outputs)
    return 0


def cmd_stratify(args) -> int:
    cfg = _load(args)
    out = cfg.out_dir()
    prob_path = Path(args.prob) if args.prob else _optional_path(cfg, "probability", "probability.tif")
    lc_path = Path(args.landcover) if args.landcover else _optional_path(cfg, "landcover", "landcover.tif")
    prob = read_raster(prob_path)
    lc = read_raster(lc_path)
    strata_grid, strat = area.stratify(prob, lc)
    strata_path = out / "strata.tif"
    write_raster(strata_path, strata_grid)
    strat_json = out / "stratification.json"
    strat_json.write_text(json.dumps(area.stratification_to_json(strat), indent=2) + "\n")
    log.info("stratify: %d strata over %.1f ha", len(strat.strata), strat.total_area_ha)
    write_run_manifest(out, "stratify", cfg.data,
                       inputs=[prob_path, lc_path], outputs=[strata_path, strat_json])
    return 0


def cmd_allocate(args) -> int:
    cfg = _load(args)
    out = cfg.out_dir()
    alloc = cfg.section("allocation")
    budget = args.budget if args.budget is not None else alloc["budget"]
    strata_path = Path(args.strata) if args.strata else _optional_path(cfg, "strata", "strata.tif")
    strat_json = _optional_path(cfg, "stratification", "stratification.json")
    strat = area.stratification_from_json(json.loads(strat_json.read_text()))
    strata_grid = read_raster(strata_path)
    policy = area.AllocationPolicy(
        prob_bin_multiplier=alloc["prob_bin_multiplier"],
        landcover_multiplier=alloc["landcover_multiplier"],
        min_per_stratum=alloc["min_per_stratum"])
    samples = area.allocate_samples(strat, strata_grid, budget, policy,
                                    seed=cfg.section("seeds")["allocate"])
    inputs = [strata_path, strat_json]
    if args.truth:
        schema = _schema(cfg)
        truth = read_raster(Path(args.truth))
        samples = area.fill_reference_from_truth(
            samples, truth.band(0), positive_codes={schema.code(labels.CASHEW)})
        inputs.append(Path(args.truth))
    samples_path = Path(args.out) if args.out else out / "samples.csv"
    area.write_samples_csv(samples_path, samples)
    log.info("allocate: %d samples over %d strata", len(samples),
             len({s.stratum_id for s in samples}))
    write_run_manifest(out, "allocate", cfg.data, inputs=inputs, outputs=[samples_path])
    return 0


def cmd_estimate(args) -> int:
    cfg = _load(args)
    out = cfg.out_dir()
    samples_path = Path(args.samples) if args.samples else out / "samples.csv"
    samples = area.read_samples_csv(samples_path)
    strat_json = _optional_path(cfg, "stratification", "stratification.json")
    strat = area.stratification_from_json(json.loads(strat_json.read_text()))
    class_map = area.default_class_map(
        strat, cashew_min_stratum=cfg.section("stratification")["cashew_min_stratum"])
    em = area.build_error_matrix(samples, strat, class_map)
    estimates = area.estimate_areas(em, strat.total_area_ha)
    overall, users, producers = area.accuracies(em)

    report = {
        "total_area_ha": strat.total_area_ha,
        "n_samples": len(samples),
        "overall_accuracy": overall,
        "users_accuracy": {str(k): v for k, v in users.items()},
        "producers_accuracy": producers,
        "warnings": list(em.warnings),
        "estimates": [{
            "class": e.class_name,
            "proportion": e.proportion,
            "area_ha": e.area_ha,
            "standard_error_ha": e.standard_error_ha,
            "ci95_ha": e.ci95_ha,
        } for e in estimates],
    }
    json_path = out / "area_report.json"
    json_path.write_text(json.dumps(report, indent=2) + "\n")
    csv_path = out / "area_report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "proportion", "area_ha", "standard_error_ha", "ci95_ha"])
        for e in estimates:
            writer.writerow([e.class_name, f"{e.proportion:.9f}", f"{e.area_ha:.3f}",
                             f"{e.standard_error_ha:.3f}", f"{e.ci95_ha:.3f}"])
    log.info("estimate: overall accuracy %.4f over %d samples", overall, len(samples))
    write_run_manifest(out, "estimate", cfg.data,
                       inputs=[samples_path, strat_json], outputs=[csv_path, json_path])
    return 0


def _read_table(path, required: list[str]) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing file: {p}")
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{p} lacks required column(s): {', '.join(missing)}")
        return [row for row in reader if any(v.strip() for v in row.values())]


def cmd_rollup(args) -> int:
    cfg = _load(args)
    out = cfg.out_dir()
    areas = _read_table(args.areas, ["province", "area_ha", "area_ci95_ha"])
    yields_rows = _read_table(args.yields, ["province", "yield_t_per_ha"])
    yields = {r["province"]: float(r["yield_t_per_ha"]) for r in yields_rows}
    estimates = {}
    accuracy = {}
    for r in areas:
        ci = float(r["area_ci95_ha"])
        estimates[r["province"]] = area.AreaEstimate(
            class_name=area.CASHEW_CLASS, proportion=0.0,
            area_ha=float(r["area_ha"]), standard_error_ha=ci / area.Z95, ci95_ha=ci)
        if r.get("accuracy_pct", "").strip():
            accuracy[r["province"]] = float(r["accuracy_pct"]) / 100.0
    adopted = {}
    if args.adopted:
        for r in _read_table(args.adopted, ["province", "production_t"]):
            adopted[r["province"]] = {
                "production_t": int(float(r["production_t"])),
                "area_ha": float(r.get("area_ha") or 0.0),
                "yield_t_per_ha": float(r["yield_t_per_ha"]) if r.get("yield_t_per_ha") else None,
            }
    records = area.production_rollup(estimates, yields,
                                     accuracy_by_province=accuracy, adopted=adopted)
    csv_path = out / "production_report.csv"
    json_path = out / "production_report.json"
    area.write_report(csv_path, json_path, records)
    log.info("rollup: %d provinces, total %d t", len(records) - 1, records[-1].production_t)
    inputs = [args.areas, args.yields] + ([args.adopted] if args.adopted else [])
    write_run_manifest(out, "rollup", cfg.data, inputs=inputs,
                       outputs=[csv_path, json_path])
    return 0


def cmd_attribute(args) -> int:
    cfg = _load(args)
    out = cfg.out_dir()
    strata_path = Path(args.strata) if args.strata else _optional_path(cfg, "strata", "strata.tif")
    loss_path = Path(args.loss)
    strata_grid = read_raster(strata_path)
    loss = read_raster(loss_path)
    cats = tuple(cfg.section("attribution")["cashew_strata"])
    table = attribution.cross_tab(strata_grid, loss, categories=cats)
    csv_path = out / "loss_crosstab.csv"
    attribution.write_attribution_csv(csv_path, table)
    outputs = [csv_path]
    if args.chart:
        attribution.render_attribution_chart(Path(args.chart), table)
        outputs.append(Path(args.chart))
    log.info("attribute: %d non-empty years",
             sum(1 for y in table.years if y not in table.empty_years))
    write_run_manifest(out, "attribute", cfg.data,
                       inputs=[strata_path, loss_path], outputs=outputs)
    return 0


def cmd_ages(args) -> int:
    cfg = _load(args)
    out = cfg.out_dir()
    poly_path = _polygons_path(cfg)
    polys = labels.load_polygons(poly_path)
    if args.groups:
        rows = _read_table(args.groups, ["polygon_index", "group"])
        groups = ["all"] * len(polys)
        for r in rows:
            groups[int(r["polygon_index"])] = r["group"]
    else:
        groups = ["all"] * len(polys)
    hist = attribution.age_histogram(polys, groups)
    csv_path = out / "ages.csv"
    attribution.write_age_csv(csv_path, hist)
    log.info("ages: %d groups", len(hist))
    inputs = [poly_path] + ([args.groups] if args.groups else [])
    write_run_manifest(out, "ages", cfg.data, inputs=inputs, outputs=[csv_path])
    return 0


# -- argument wiring ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cropmap",
        description="Crop mapping pipeline: segmentation, probability maps, "
                    "area estimation, and loss attribution.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="pipeline YAML config")
        p.add_argument("--verbose", action="store_true", help="log progress to stderr")
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a synthetic landscape with known truth")
    add("build-dataset", cmd_build_dataset, "rasterize labels and cut patch caches")

    p = add("train", cmd_train, "train phase 1 (categories) or phase 2 (cashew)")
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--init", help="phase-1 checkpoint to start phase 2 from")

    p = add("infer", cmd_infer, "tiled probability inference with MC dropout")
    p.add_argument("--model", help="checkpoint path (default: out_dir/phase2.ckpt)")
    p.add_argument("--inputs", help="pipeline config naming the input rasters")
    p.add_argument("--stride", type=int, help="tile stride in pixels (multiple of 8)")
    p.add_argument("--mc-runs", type=int, dest="mc_runs", help="MC dropout realizations")
    p.add_argument("--dropout", type=float, help="inference dropout rate")
    p.add_argument("--out", help="output probability GeoTIFF")
    p.add_argument("--std-out", dest="std_out", help="output std GeoTIFF")
    p.add_argument("--landcover", help="landcover GeoTIFF for cleaning")
    p.add_argument("--suppress", help="comma-separated category names to zero out")

    p = add("stratify", cmd_stratify, "cut the probability map into sampling strata")
    p.add_argument("--prob", help="probability GeoTIFF (default: out_dir/probability.tif)")
    p.add_argument("--landcover", help="landcover GeoTIFF")

    p = add("allocate", cmd_allocate, "draw stratified samples for interpretation")
    p.add_argument("--budget", type=int, help="total sample budget")
    p.add_argument("--strata", help="strata GeoTIFF (default: out_dir/strata.tif)")
    p.add_argument("--truth", help="truth mask GeoTIFF to auto-fill reference labels")
    p.add_argument("--out", help="output samples CSV")

    p = add("estimate", cmd_estimate, "area and accuracy estimates from samples")
    p.add_argument("--samples", help="interpreted samples CSV")

    p = add("rollup", cmd_rollup, "province production report from areas and yields")
    p.add_argument("--areas", required=True, help="CSV: province,area_ha,area_ci95_ha[,accuracy_pct]")
    p.add_argument("--yields", required=True, help="CSV: province,yield_t_per_ha")
    p.add_argument("--adopted", help="CSV of externally adopted provinces")

    p = add("attribute", cmd_attribute, "cross-tabulate loss years against strata")
    p.add_argument("--loss", required=True, help="first-loss-year GeoTIFF")
    p.add_argument("--strata", help="strata GeoTIFF (default: out_dir/strata.tif)")
    p.add_argument("--chart", help="optional chart PNG path")

    p = add("ages", cmd_ages, "cashew age histograms from polygon attributes")
    p.add_argument("--groups", help="CSV: polygon_index,group")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(message)s",
                        level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    except CropmapError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
