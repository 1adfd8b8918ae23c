"""Command-line pipeline: synth | ingest | clean | train | explain | evaluate | impact.

One JSON config file carries paths and every tunable constant; flags
override the config, the config overrides built-in defaults.  Every stage
writes its artifacts into the output directory and records inputs/outputs
(with content digests) in manifest.json, which is enough to re-execute the
run.  Outputs are byte-stable for a fixed config and seed.

Exit codes: 0 success, 1 usage, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .anomaly import flag_outliers, read_limits_csv, two_phase_clean, write_limits_csv
from .errors import FeedFormatError, FleetFuelError, MissingStageError
from .evaluate import (
    MODEL_METRICS_COLUMNS,
    aggregate_category_impact,
    catalog_mape,
    model_metrics,
    monthly_impact,
    outlier_vs_explained,
    train_test_split,
    write_report_csv,
    write_report_json,
)
from .explain import (
    BR_ORDER,
    ReferencePolicy,
    apply_business_rules,
    generate_daily_explanations,
    read_explanations_csv,
    write_audit_log,
    write_explanations_csv,
    write_inlier_medians_csv,
)
from .gam import DEFAULT_CATEGORICALS, AdditiveModel, TrainConfig, fit, write_shape_curves_csv
from .ingest import (
    LABEL_INLIER,
    RouteThresholds,
    aggregate_daily,
    assign_classes,
    enrich_records,
    impute_missing,
    parse_feed_csv,
    quality_filter,
    read_far_csv,
    write_far_csv,
)
from .registry import (
    CatalogTable,
    FeatureRegistry,
    VinMap,
    assign_groups,
    load_class_table,
    load_sota_limits,
    read_identities_csv,
    write_identities_csv,
)
from .synthgen import SynthSpec, default_spec, generate

logger = logging.getLogger(__name__)


class UsageError(FleetFuelError):
    """Bad invocation: unparseable config or unknown config keys."""


DEFAULT_CONFIG = {
    "fleet_id": "fleet",
    "paths": {
        "feed": None,
        "registry": None,
        "vin_map": None,
        "catalog": None,
        "sota_limits": None,
        "class_table": None,
        "synth_spec": None,
        "out_dir": "out",
    },
    "route_thresholds": {"th_kms": 30.0, "low_th_time": 0.5, "high_th_time": 0.65},
    "train": {
        "learning_rate": 0.01,
        "max_rounds": 5000,
        "patience": 50,
        "max_bins": 256,
        "max_leaves": 3,
        "bags": 8,
        "validation_fraction": 0.15,
        "seed": 0,
        "workers": 1,
    },
    "split": {"fraction": 0.9, "seed": 0},
    "rules": {"br2_threshold": 0.01, "br5_cap": 0.8},
    "catalog_offset": 1.0,
    "co2_per_liter": 2.67633,
    "price_per_liter": None,
    "ignore_channels": [],
}

STAGES = ("ingest", "clean", "train", "explain", "evaluate", "impact")


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = dict(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise UsageError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(defaults[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


class RunContext:
    """Resolved config plus lazy loaders for shared tables."""

    def __init__(self, config: dict, overrides: dict):
        self.config = config
        self.overrides = overrides
        self.out_dir = Path(config["paths"]["out_dir"])
        self._registry: FeatureRegistry | None = None

    @classmethod
    def from_args(cls, args) -> "RunContext":
        config = DEFAULT_CONFIG
        if args.config is not None:
            cfg_path = Path(args.config)
            if not cfg_path.exists():
                raise FeedFormatError(f"missing file: {cfg_path}")
            with open(cfg_path, encoding="utf-8") as fh:
                try:
                    user = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise UsageError(f"config {cfg_path} is not valid JSON: {exc}") from exc
            config = _merge(DEFAULT_CONFIG, user)
        overrides = {}
        if args.out is not None:
            config = _merge(config, {"paths": {"out_dir": args.out}})
            overrides["out_dir"] = args.out
        if args.seed is not None:
            config = _merge(config, {"train": {"seed": args.seed}, "split": {"seed": args.seed}})
            overrides["seed"] = args.seed
        if args.workers is not None:
            config = _merge(config, {"train": {"workers": args.workers}})
            overrides["workers"] = args.workers
        return cls(config, overrides)

    # -- shared tables -------------------------------------------------------

    def registry(self) -> FeatureRegistry:
        if self._registry is None:
            path = self.config["paths"]["registry"]
            self._registry = (
                FeatureRegistry.default() if path is None else FeatureRegistry.from_csv(self._existing(path))
            )
        return self._registry

    def _existing(self, path: str) -> Path:
        p = Path(path)
        if not p.exists():
            raise FeedFormatError(f"missing file: {p}")
        return p

    def artifact(self, name: str, producer: str) -> Path:
        p = self.out_dir / name
        if not p.exists():
            raise MissingStageError(producer)
        return p

    def route_thresholds(self) -> RouteThresholds:
        rt = self.config["route_thresholds"]
        return RouteThresholds(
            th_kms=float(rt["th_kms"]),
            low_th_time=float(rt["low_th_time"]),
            high_th_time=float(rt["high_th_time"]),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config["train"])

    # -- manifest -------------------------------------------------------------

    def record_stage(self, stage: str, inputs: list[Path], outputs: list[Path]) -> None:
        manifest_path = self.out_dir / "manifest.json"
        manifest = {"package_version": __version__, "config": self.config, "stages": {}}
        if manifest_path.exists():
            with open(manifest_path, encoding="utf-8") as fh:
                manifest = json.load(fh)
            manifest["package_version"] = __version__
            manifest["config"] = self.config
        manifest.setdefault("stages", {})[stage] = {
            "inputs": {str(p): _digest(p) for p in inputs},
            "outputs": {str(p): _digest(p) for p in outputs},
            "overrides": self.overrides,
        }
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Stages


def stage_synth(ctx: RunContext) -> None:
    spec_path = ctx.config["paths"]["synth_spec"]
    if spec_path is None:
        spec = default_spec(seed=ctx.config["train"]["seed"])
    else:
        spec = SynthSpec.from_json(ctx._existing(spec_path))
        if "seed" in ctx.overrides:
            spec.seed = ctx.overrides["seed"]
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    fleet = generate(spec, ctx.out_dir)
    spec_echo = ctx.out_dir / "synth_spec.json"
    spec.to_json(spec_echo)
    ctx.record_stage(
        "synth",
        inputs=[],
        outputs=[
            fleet.feed_path,
            fleet.vin_map_path,
            fleet.catalog_path,
            fleet.truth_days_path,
            fleet.truth_savings_path,
            spec_echo,
        ],
    )
    print(f"synth: {len(fleet.days)} vehicle-days -> {fleet.feed_path}")


def stage_ingest(ctx: RunContext) -> None:
    paths = ctx.config["paths"]
    feed_path = ctx._existing(paths["feed"] or ctx.out_dir / "feed.csv")
    vin_path = ctx._existing(paths["vin_map"] or ctx.out_dir / "vin_map.csv")
    registry = ctx.registry()
    ctx.out_dir.mkdir(parents=True, exist_ok=True)

    parsed = parse_feed_csv(feed_path)
    records, agg_report = aggregate_daily(
        parsed.readings, registry, ctx.config["ignore_channels"]
    )
    vin_map = VinMap.from_csv(vin_path)
    identities = assign_groups(sorted({r.vehicle_id for r in records}), vin_map)
    records = enrich_records(records, identities, ctx.route_thresholds())

    far_path = ctx.out_dir / "far_raw.csv"
    write_far_csv(records, registry, far_path)
    report_path = ctx.out_dir / "ingest_report.json"
    write_report_json(
        {
            "n_readings": agg_report.n_readings,
            "n_records": agg_report.n_records,
            "rejects": parsed.rejects,
            "unknown_channels": agg_report.unknown_channels,
        },
        report_path,
    )
    identities_path = ctx.out_dir / "identities.csv"
    write_identities_csv(identities, identities_path)
    ctx.record_stage(
        "ingest",
        inputs=[feed_path, vin_path],
        outputs=[far_path, report_path, identities_path],
    )
    print(f"ingest: {agg_report.n_records} records, {parsed.n_rejected} rejected rows")


def stage_clean(ctx: RunContext) -> None:
    registry = ctx.registry()
    far_path = ctx.artifact("far_raw.csv", "ingest")
    records = read_far_csv(far_path, registry)

    base, removal = quality_filter(records)
    class_table = load_class_table(ctx.config["paths"]["class_table"])
    classes = assign_classes(base, class_table)

    training, limits, noise = two_phase_clean(base)
    low_keys = set(noise.low_days)
    labeled = [r for r in base if (r.vehicle_id, r.date.isoformat()) not in low_keys]
    labeled = flag_outliers(labeled, limits)
    impute_missing(labeled, registry)

    identities = read_identities_csv(ctx.artifact("identities.csv", "ingest"))
    identities = {
        vid: dataclasses.replace(ident, vehicle_class=classes.get(ident.vehicle_group, 0))
        for vid, ident in identities.items()
    }

    labeled_path = ctx.out_dir / "far_labeled.csv"
    write_far_csv(labeled, registry, labeled_path)
    training_path = ctx.out_dir / "far_training.csv"
    write_far_csv(training, registry, training_path)
    limits_path = ctx.out_dir / "limits.csv"
    write_limits_csv(limits, limits_path)
    identities_path = ctx.out_dir / "identities.csv"
    write_identities_csv(identities, identities_path)
    report_path = ctx.out_dir / "clean_report.json"
    write_report_json(
        {
            "structural_removals": removal.reasons,
            "n_low_fuel": noise.n_low,
            "n_noise_fuel": noise.n_noise,
            "emptied_cells": [list(c) for c in noise.emptied_cells],
            "skipped_cells": [list(c) for c in limits.skipped],
            "n_labeled": len(labeled),
            "n_training": len(training),
        },
        report_path,
    )
    ctx.record_stage(
        "clean",
        inputs=[far_path],
        outputs=[labeled_path, training_path, limits_path, identities_path, report_path],
    )
    print(
        f"clean: {len(labeled)} labeled, {len(training)} training "
        f"({removal.n_removed} structural, {noise.n_low} low, {noise.n_noise} noise)"
    )


def stage_train(ctx: RunContext) -> None:
    registry = ctx.registry()
    training_path = ctx.artifact("far_training.csv", "clean")
    records = read_far_csv(training_path, registry)
    split_cfg = ctx.config["split"]
    train_records, test_records = train_test_split(
        records, float(split_cfg["fraction"]), int(split_cfg["seed"])
    )
    config = ctx.train_config()
    model = fit(train_records, registry, config)
    predictions = model.predict_many(test_records)
    metrics = model_metrics(
        ctx.config["fleet_id"],
        test_records,
        predictions,
        n_predictors=len(model.columns),
        n_train=len(train_records),
    )
    model_path = ctx.out_dir / "model.json"
    model.save_json(model_path)
    curves_path = ctx.out_dir / "shape_curves.csv"
    write_shape_curves_csv(model, curves_path)
    metrics_path = ctx.out_dir / "train_metrics.json"
    write_report_json(metrics, metrics_path)
    metrics_csv = ctx.out_dir / "train_metrics.csv"
    write_report_csv([metrics], MODEL_METRICS_COLUMNS, metrics_csv)
    ctx.record_stage(
        "train",
        inputs=[training_path],
        outputs=[model_path, curves_path, metrics_path, metrics_csv],
    )
    print(
        f"train: mape={metrics.median_vehicle_mape:.2f}% ({metrics.mape_category}), "
        f"adj_r2={metrics.adjusted_r2:.3f} ({metrics.r2_category})"
    )


def _load_explain_inputs(ctx: RunContext):
    registry = ctx.registry()
    model = AdditiveModel.load_json(ctx.artifact("model.json", "train"))
    labeled = read_far_csv(ctx.artifact("far_labeled.csv", "clean"), registry)
    limits = read_limits_csv(ctx.artifact("limits.csv", "clean"))
    inliers = [r for r in labeled if r.anomaly_label == LABEL_INLIER]
    policy = ReferencePolicy.from_records(registry, inliers, DEFAULT_CATEGORICALS)
    return registry, model, labeled, limits, policy


def stage_explain(ctx: RunContext) -> None:
    registry, model, labeled, limits, policy = _load_explain_inputs(ctx)
    rules_cfg = ctx.config["rules"]
    pre_rows = generate_daily_explanations(model, labeled, policy, limits)
    final_rows, audit = apply_business_rules(
        pre_rows,
        policy,
        BR_ORDER,
        br2_threshold=float(rules_cfg["br2_threshold"]),
        br5_cap=float(rules_cfg["br5_cap"]),
    )
    explanations_path = ctx.out_dir / "explanations.csv"
    write_explanations_csv(final_rows, explanations_path)
    prefilter_path = ctx.out_dir / "explanations_prefilter.csv"
    write_explanations_csv(pre_rows, prefilter_path)
    audit_path = ctx.out_dir / "audit.jsonl"
    write_audit_log(audit, audit_path)
    medians_path = ctx.out_dir / "inlier_medians.csv"
    write_inlier_medians_csv(policy, labeled, medians_path)
    ctx.record_stage(
        "explain",
        inputs=[
            ctx.out_dir / "model.json",
            ctx.out_dir / "far_labeled.csv",
            ctx.out_dir / "limits.csv",
        ],
        outputs=[explanations_path, prefilter_path, audit_path, medians_path],
    )
    print(
        f"explain: {len(final_rows)} rows on "
        f"{len({r.day_key for r in final_rows})} vehicle-days "
        f"({len(audit)} rows dropped by rules)"
    )


def stage_evaluate(ctx: RunContext) -> None:
    registry, model, labeled, limits, policy = _load_explain_inputs(ctx)
    fleet = ctx.config["fleet_id"]
    final_rows = read_explanations_csv(ctx.artifact("explanations.csv", "explain"))
    pre_rows = read_explanations_csv(ctx.artifact("explanations_prefilter.csv", "explain"))
    rules_cfg = ctx.config["rules"]

    impact_rows, _ = apply_business_rules(
        pre_rows, policy, ("BR1", "BR3", "BR2"), br2_threshold=float(rules_cfg["br2_threshold"])
    )
    sota = load_sota_limits(ctx.config["paths"]["sota_limits"])
    impacts = aggregate_category_impact(impact_rows, registry, sota, fleet)

    comparison = outlier_vs_explained(final_rows, limits, labeled, fleet)

    identities = read_identities_csv(ctx.artifact("identities.csv", "clean"))
    catalog_path = ctx.config["paths"]["catalog"] or ctx.out_dir / "catalog.csv"
    catalog = CatalogTable.from_csv(ctx._existing(catalog_path))
    catalog_report = catalog_mape(
        final_rows,
        labeled,
        identities,
        catalog,
        policy,
        fleet,
        offset=float(ctx.config["catalog_offset"]),
    )

    outputs = []
    # model-metrics passthrough so the evaluation directory is self-contained
    train_metrics = json.loads(ctx.artifact("train_metrics.json", "train").read_text())
    p = ctx.out_dir / "report_model_metrics.json"
    write_report_json(train_metrics, p)
    outputs.append(p)
    p = ctx.out_dir / "report_model_metrics.csv"
    write_report_csv([train_metrics], MODEL_METRICS_COLUMNS, p)
    outputs.append(p)
    p = ctx.out_dir / "report_category_impact.json"
    write_report_json({"fleet": fleet, "impacts": impacts}, p)
    outputs.append(p)
    p = ctx.out_dir / "report_category_impact.csv"
    write_report_csv(
        impacts,
        ("category", "subcategory", "fleet", "median_impact_pct", "n_days", "min_pct", "max_pct", "verdict"),
        p,
    )
    outputs.append(p)
    p = ctx.out_dir / "report_outlier_explained.json"
    write_report_json({"fleet": fleet, "comparison": comparison}, p)
    outputs.append(p)
    p = ctx.out_dir / "report_outlier_explained.csv"
    write_report_csv(
        [comparison] if comparison is not None else [],
        ("fleet", "n_outlier_days", "median_explained", "median_anomalous", "w_statistic", "p_value"),
        p,
    )
    outputs.append(p)
    p = ctx.out_dir / "report_catalog_mape.json"
    write_report_json(catalog_report, p)
    outputs.append(p)
    p = ctx.out_dir / "report_catalog_mape.csv"
    write_report_csv(
        [catalog_report],
        (
            "fleet",
            "mape_1",
            "mape_2",
            "mape_3",
            "pct_mape1_lt_50",
            "pct_mape1_lt_20",
            "pct_mape1_lt_10",
            "pct_mape2_lt_50",
            "pct_mape2_lt_20",
            "pct_mape2_lt_10",
            "pct_below_catalog",
            "n_days",
            "n_catalog_days",
            "n_unmatched",
        ),
        p,
    )
    outputs.append(p)
    ctx.record_stage(
        "evaluate",
        inputs=[ctx.out_dir / "explanations.csv", ctx.out_dir / "explanations_prefilter.csv"],
        outputs=outputs,
    )
    if comparison is not None:
        print(
            f"evaluate: median explained {comparison.median_explained:.3f} vs "
            f"anomalous {comparison.median_anomalous:.3f} (p={comparison.p_value:.4f})"
        )
    else:
        print("evaluate: no outlier days to compare")


def stage_impact(ctx: RunContext) -> None:
    registry = ctx.registry()
    fleet = ctx.config["fleet_id"]
    final_rows = read_explanations_csv(ctx.artifact("explanations.csv", "explain"))
    labeled = read_far_csv(ctx.artifact("far_labeled.csv", "clean"), registry)
    table = monthly_impact(
        final_rows,
        labeled,
        registry,
        fleet,
        co2_per_liter=float(ctx.config["co2_per_liter"]),
        price_per_liter=(
            None if ctx.config["price_per_liter"] is None else float(ctx.config["price_per_liter"])
        ),
    )
    json_path = ctx.out_dir / "monthly_impact.json"
    write_report_json({"fleet": fleet, "months": table}, json_path)
    csv_path = ctx.out_dir / "monthly_impact.csv"
    write_report_csv(
        table,
        ("fleet", "month", "total_fuel_l", "extra_fuel_all_l", "extra_fuel_behaviour_l", "co2_kg", "cost"),
        csv_path,
    )
    ctx.record_stage(
        "impact",
        inputs=[ctx.out_dir / "explanations.csv"],
        outputs=[json_path, csv_path],
    )
    for row in table:
        print(
            f"impact {row.month}: {row.total_fuel_l:.0f} L total, "
            f"{row.extra_fuel_behaviour_l:.0f} L behaviour extra, {row.co2_kg:.0f} kg CO2"
        )


STAGE_FUNCS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "clean": stage_clean,
    "train": stage_train,
    "explain": stage_explain,
    "evaluate": stage_evaluate,
    "impact": stage_impact,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetfuel",
        description="Fleet fuel analytics pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", *STAGES, "pipeline"):
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override every stage seed")
        p.add_argument("--workers", type=int, default=None, help="worker count for training bags")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        ctx = RunContext.from_args(args)
        if args.command == "pipeline":
            for name in STAGES:
                STAGE_FUNCS[name](ctx)
        else:
            STAGE_FUNCS[args.command](ctx)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FleetFuelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
