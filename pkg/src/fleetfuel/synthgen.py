"""Deterministic synthetic fleet with planted additive ground truth.

Generates a raw telemetry feed (exactly the ingest format) plus truth
tables carrying, for every vehicle-day, the planted per-feature fuel
contributions, the noise term, the outlier designation and the realized
saving of each feature against its reference.  Feature-to-fuel maps are
step functions, so a binned learner can recover them exactly and any
recovery error is attributable to the trainer.

Exactness: trip distances are chosen so that distance/100 is a power of
two, emitted readings are repr round-trips, and each day's fuel is nudged
(at most 1 ulp) to a float that survives the fuel/kms*100 round trip.
The truth tables therefore match the ingested records bit for bit.

Outlier days are cause-driven: designated days have their driver features
raised into top step segments, one driver at a time, until the day's fuel
reaches the clean Q3 plus the configured multiple of the clean IQR for
its (group, route) cell.  The model can learn those top segments from the
small share of ordinary days that visit them individually.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from datetime import date as date_type, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .anomaly import quartiles
from .errors import DataError
from .ingest import (
    CITY_TIME_CHANNEL,
    FEED_COLUMNS,
    ROUTE_CITY,
    ROUTE_COMBINED,
    ROUTE_HIGHWAY,
    TRIP_FUEL_CHANNEL,
    TRIP_KMS_CHANNEL,
    compute_avg_fuel,
)

# distances whose /100 factor is a power of two, keyed by route type
ROUTE_KMS = {
    ROUTE_CITY: (25.0,),
    ROUTE_COMBINED: (25.0, 50.0),
    ROUTE_HIGHWAY: (50.0, 100.0, 200.0),
}
ROUTE_PTC = {
    ROUTE_CITY: (0.66, 0.95),
    ROUTE_COMBINED: (0.52, 0.63),
    ROUTE_HIGHWAY: (0.05, 0.49),
}


@dataclass(frozen=True)
class SynthFeature:
    """One planted feature: sampling range and step-function fuel map."""

    name: str
    low: float
    high: float
    cuts: tuple[float, ...]
    values: tuple[float, ...]
    aggregator: str = "mean"
    integer: bool = False
    top_fraction: float = 0.0
    driver: bool = False
    reference_zero: bool = False

    def __post_init__(self):
        if len(self.values) != len(self.cuts) + 1:
            raise DataError(f"feature {self.name}: need one value per segment")
        if list(self.cuts) != sorted(self.cuts):
            raise DataError(f"feature {self.name}: cuts must be ascending")
        if not 0.0 <= self.top_fraction <= 1.0:
            raise DataError(f"feature {self.name}: top_fraction out of range")

    def contribution(self, x: float) -> float:
        return self.values[int(np.searchsorted(self.cuts, x, side="right"))]


@dataclass(frozen=True)
class SynthGroup:
    make: str
    model: str
    year: str
    fuel_type: str
    base_fuel: float
    weight: float = 1.0

    def __post_init__(self):
        if not self.base_fuel > 0:
            raise DataError("base_fuel must be positive")


@dataclass
class SynthSpec:
    seed: int = 0
    n_vehicles: int = 250
    n_days: int = 20
    start_date: str = "2021-01-01"
    groups: list[SynthGroup] = field(default_factory=list)
    features: list[SynthFeature] = field(default_factory=list)
    noise_sigma: float = 0.25
    outlier_rate: float = 0.03
    outlier_magnitude_iqr: float = 3.5
    route_mix: dict[str, float] = field(
        default_factory=lambda: {"city": 0.3, "combined": 0.3, "highway": 0.4}
    )
    unmatched_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise DataError("outlier_rate must be in [0, 1]")
        if not 0.0 <= self.unmatched_fraction <= 1.0:
            raise DataError("unmatched_fraction must be in [0, 1]")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma cannot be negative")

    def to_json(self, path: str | Path) -> None:
        payload = asdict(self)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthSpec":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        payload["groups"] = [SynthGroup(**g) for g in payload.get("groups", [])]
        payload["features"] = [
            SynthFeature(
                **{**f, "cuts": tuple(f["cuts"]), "values": tuple(f["values"])}
            )
            for f in payload.get("features", [])
        ]
        return cls(**payload)


def default_spec(seed: int = 0, n_vehicles: int = 250, n_days: int = 20, **overrides) -> SynthSpec:
    """Reference fleet: four vehicle groups, twelve planted features."""
    groups = [
        SynthGroup("Aurora", "Vanta", "2018", "diesel", 8.0, 3),
        SynthGroup("Aurora", "Crest", "2019", "diesel", 9.5, 3),
        SynthGroup("Borealis", "Haul 250", "2017", "diesel", 11.5, 2),
        SynthGroup("Borealis", "Titan", "2016", "diesel", 14.0, 2),
    ]
    features = [
        SynthFeature("rpm_high", 0, 200, (40, 80, 150), (0.0, 0.25, 0.5, 2.0), "sum",
                     integer=True, top_fraction=0.015, driver=True, reference_zero=True),
        SynthFeature("count_jackrabbit", 0, 30, (5, 12, 22), (0.0, 0.2, 0.4, 1.8), "sum",
                     integer=True, top_fraction=0.015, driver=True, reference_zero=True),
        SynthFeature("count_harsh_turns", 0, 25, (6, 14, 20), (0.0, 0.15, 0.35, 1.7), "sum",
                     integer=True, top_fraction=0.015, driver=True, reference_zero=True),
        SynthFeature("time_idling", 0, 3600, (600, 1500, 2800), (0.0, 0.2, 0.45, 1.9), "sum",
                     integer=True, top_fraction=0.015, driver=True, reference_zero=True),
        SynthFeature("rpm_red", 0, 60, (15, 35), (0.0, 0.15, 0.3), "sum",
                     integer=True, reference_zero=True),
        SynthFeature("rpm_yellow", 0, 80, (25, 55), (0.0, 0.1, 0.25), "sum",
                     integer=True, reference_zero=True),
        SynthFeature("rpm_orange", 0, 70, (20, 45), (0.0, 0.1, 0.3), "sum",
                     integer=True, reference_zero=True),
        SynthFeature("count_speed_limit_90", 0, 200, (40, 120), (0.0, 0.15, 0.4), "sum",
                     integer=True),
        SynthFeature("mean_speed_hwy", 60, 130, (90, 110), (0.0, 0.3, 0.6), "mean"),
        SynthFeature("mean_forward_acc", 0.2, 4.0, (1.5, 2.8), (0.0, 0.2, 0.5), "mean"),
        SynthFeature("mean_side_to_side_acc", 0.1, 2.0, (0.9,), (0.0, 0.25), "mean"),
        SynthFeature("mean_exterior_temp", 262, 310, (275, 290), (0.5, 0.2, 0.0), "mean"),
    ]
    spec = SynthSpec(
        seed=seed,
        n_vehicles=n_vehicles,
        n_days=n_days,
        groups=groups,
        features=features,
    )
    for key, value in overrides.items():
        setattr(spec, key, value)
    return spec


def _snap_roundtrip(f: float) -> float:
    """Nearest float surviving f -> f/100*100, at most 1 ulp away."""
    for _ in range(8):
        g = f / 100.0 * 100.0
        if g == f:
            return f
        f = g
    raise DataError(f"value {f!r} does not stabilize under the fuel round trip")


@dataclass
class TruthDay:
    """Ground truth for one generated vehicle-day."""

    vehicle_id: str
    date: date_type
    synth_group: int
    make: str
    model: str
    year: str
    fuel_type: str
    route_type: str
    trip_kms: float
    per_time_city: float
    fuel_l100: float
    clean_fuel_l100: float
    planted_outlier: bool
    boost_added: float
    base_fuel: float
    noise_residual: float
    feature_values: dict[str, float]
    contributions: dict[str, float]

    @property
    def day_key(self) -> tuple[str, date_type]:
        return (self.vehicle_id, self.date)


@dataclass
class GeneratedFleet:
    feed_path: Path
    vin_map_path: Path
    catalog_path: Path
    truth_days_path: Path
    truth_savings_path: Path
    days: list[TruthDay]


def _group_counts(spec: SynthSpec) -> list[int]:
    weights = np.asarray([g.weight for g in spec.groups], dtype=np.float64)
    shares = weights / weights.sum()
    counts = np.floor(shares * spec.n_vehicles).astype(int)
    for i in range(spec.n_vehicles - counts.sum()):
        counts[i % len(counts)] += 1
    return counts.tolist()


def _draw_feature(feat: SynthFeature, rng: np.random.Generator, force_top: bool = False) -> float:
    top_cut = feat.cuts[-1] if feat.cuts else feat.low
    if force_top or (feat.top_fraction > 0 and rng.random() < feat.top_fraction):
        value = rng.uniform(top_cut, feat.high)
    elif feat.top_fraction > 0:
        value = rng.uniform(feat.low, top_cut)
    else:
        value = rng.uniform(feat.low, feat.high)
    if feat.integer:
        value = float(int(round(value)))
    return min(max(value, feat.low), feat.high)


def generate(spec: SynthSpec, out_dir: str | Path) -> GeneratedFleet:
    """Generate the feed and truth tables into out_dir.

    Deterministic in the spec (byte-identical files for equal specs);
    vehicles draw from independent sub-seeds in vehicle order.
    """
    if not spec.groups or not spec.features:
        raise DataError("spec needs at least one group and one feature")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    start = date_type.fromisoformat(spec.start_date)
    dates = [start + timedelta(days=i) for i in range(spec.n_days)]
    routes = sorted(spec.route_mix)
    route_probs = np.asarray([spec.route_mix[r] for r in routes], dtype=np.float64)
    route_probs = route_probs / route_probs.sum()

    counts = _group_counts(spec)
    vehicle_group: list[int] = []
    vehicle_ids: list[str] = []
    serial = 0
    for g, count in enumerate(counts):
        for k in range(count):
            vehicle_group.append(g)
            vehicle_ids.append(f"VG{g:02d}-{serial:04d}")
            serial += 1
    n_unmatched = int(round(spec.unmatched_fraction * spec.n_vehicles))
    for i in range(n_unmatched):
        v = spec.n_vehicles - 1 - i
        vehicle_ids[v] = f"XV-{v:04d}"

    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_vehicles)
    rngs = [np.random.default_rng(s) for s in seeds]

    days: list[TruthDay] = []
    for v in range(spec.n_vehicles):
        rng = rngs[v]
        group = spec.groups[vehicle_group[v]]
        for day in dates:
            route = routes[int(rng.choice(len(routes), p=route_probs))]
            kms = float(rng.choice(ROUTE_KMS[route]))
            lo, hi = ROUTE_PTC[route]
            ptc = float(rng.uniform(lo, hi))
            values = {f.name: _draw_feature(f, rng) for f in spec.features}
            noise = float(rng.normal(0.0, spec.noise_sigma)) if spec.noise_sigma else 0.0
            planted = bool(rng.random() < spec.outlier_rate)
            contribs = {f.name: f.contribution(values[f.name]) for f in spec.features}
            clean = _snap_roundtrip(group.base_fuel + sum(contribs.values()) + noise)
            days.append(
                TruthDay(
                    vehicle_id=vehicle_ids[v],
                    date=day,
                    synth_group=vehicle_group[v],
                    make=group.make,
                    model=group.model,
                    year=group.year,
                    fuel_type=group.fuel_type,
                    route_type=route,
                    trip_kms=kms,
                    per_time_city=ptc,
                    fuel_l100=clean,
                    clean_fuel_l100=clean,
                    planted_outlier=planted,
                    boost_added=0.0,
                    base_fuel=group.base_fuel,
                    noise_residual=0.0,
                    feature_values=values,
                    contributions=contribs,
                )
            )

    _apply_outlier_boosts(spec, days, vehicle_ids, rngs)

    for d in days:
        partial = d.base_fuel
        for f in spec.features:
            partial += d.contributions[f.name]
        d.noise_residual = d.fuel_l100 - partial

    feed_path = out / "feed.csv"
    _write_feed(spec, days, feed_path)
    vin_map_path = out / "vin_map.csv"
    _write_vin_map(spec, vin_map_path)
    catalog_path = out / "catalog.csv"
    _write_catalog(spec, days, catalog_path)
    truth_days_path = out / "truth_days.csv"
    _write_truth_days(spec, days, truth_days_path)
    truth_savings_path = out / "truth_savings.csv"
    _write_truth_savings(spec, days, truth_savings_path)
    return GeneratedFleet(
        feed_path=feed_path,
        vin_map_path=vin_map_path,
        catalog_path=catalog_path,
        truth_days_path=truth_days_path,
        truth_savings_path=truth_savings_path,
        days=days,
    )


def _apply_outlier_boosts(
    spec: SynthSpec,
    days: list[TruthDay],
    vehicle_ids: list[str],
    rngs: list[np.random.Generator],
) -> None:
    """Raise designated days to clean Q3 + magnitude * IQR via driver features."""
    drivers = [f for f in spec.features if f.driver]
    if not drivers or spec.outlier_rate == 0:
        for d in days:
            d.planted_outlier = False
        return

    bars: dict[tuple[int, str], float] = {}
    by_cell: dict[tuple[int, str], list[float]] = {}
    for d in days:
        by_cell.setdefault((d.synth_group, d.route_type), []).append(d.clean_fuel_l100)
    for cell, values in by_cell.items():
        if len(values) >= 4:
            q1, q3 = quartiles(values)
            # aim a quarter-IQR past the bar so borderline days clear it
            bars[cell] = q3 + (spec.outlier_magnitude_iqr + 0.25) * (q3 - q1)

    rng_by_vehicle = {vid: rngs[i] for i, vid in enumerate(vehicle_ids)}
    for d in days:
        if not d.planted_outlier:
            continue
        bar = bars.get((d.synth_group, d.route_type))
        if bar is None:
            d.planted_outlier = False
            continue
        rng = rng_by_vehicle[d.vehicle_id]
        needed = bar - d.clean_fuel_l100
        added = 0.0
        for feat in drivers:
            if added >= needed:
                break
            top_cut = feat.cuts[-1]
            if d.feature_values[feat.name] >= top_cut:
                continue
            new_value = float(rng.uniform(top_cut, feat.high))
            if feat.integer:
                new_value = float(int(round(new_value)))
            new_value = min(max(new_value, top_cut), feat.high)
            gain = feat.contribution(new_value) - d.contributions[feat.name]
            d.feature_values[feat.name] = new_value
            d.contributions[feat.name] = feat.contribution(new_value)
            added += gain
        d.boost_added = added
        d.fuel_l100 = _snap_roundtrip(d.clean_fuel_l100 + added)


def _write_feed(spec: SynthSpec, days: list[TruthDay], path: Path) -> None:
    """Two half-readings per sum channel, two equal readings per mean channel."""
    by_agg = {f.name: f.aggregator for f in spec.features}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEED_COLUMNS)
        for d in days:
            stamp_a = f"{d.date.isoformat()} 08:%02d:00+00:00"
            stamp_b = f"{d.date.isoformat()} 16:%02d:00+00:00"
            fuel_used = d.fuel_l100 * (d.trip_kms / 100.0)
            check = compute_avg_fuel(fuel_used, d.trip_kms)
            if check != d.fuel_l100:
                raise DataError(
                    f"round-trip drift on {d.vehicle_id}/{d.date}: {check!r} != {d.fuel_l100!r}"
                )
            channels: list[tuple[str, list[float]]] = [
                (TRIP_KMS_CHANNEL, [d.trip_kms / 2.0, d.trip_kms / 2.0]),
                (TRIP_FUEL_CHANNEL, [fuel_used / 2.0, fuel_used / 2.0]),
                (CITY_TIME_CHANNEL, [d.per_time_city]),
            ]
            for name, value in d.feature_values.items():
                if by_agg[name] == "sum":
                    channels.append((name, [value / 2.0, value / 2.0]))
                else:
                    channels.append((name, [value, value]))
            for idx, (name, readings) in enumerate(channels):
                minute = idx % 60
                stamps = (stamp_a % minute, stamp_b % minute)
                for k, value in enumerate(readings):
                    writer.writerow([stamps[k], d.vehicle_id, name, repr(value)])


def _write_vin_map(spec: SynthSpec, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("vin_prefix", "make", "model", "year", "fuel_type"))
        for g, group in enumerate(spec.groups):
            writer.writerow([f"VG{g:02d}", group.make, group.model, group.year, group.fuel_type])


def _write_catalog(spec: SynthSpec, days: list[TruthDay], path: Path) -> None:
    """Catalog fuel = median clean fuel per identity and route, twice with jitter."""
    cells: dict[tuple, list[float]] = {}
    for d in days:
        if not d.planted_outlier:
            key = (d.make, d.model, d.year, d.fuel_type, d.route_type)
            cells.setdefault(key, []).append(d.clean_fuel_l100)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("make", "model", "year", "fuel_type", "route_type", "l_per_100km"))
        for key in sorted(cells):
            med = float(np.median(cells[key]))
            for jitter in (-0.1, 0.1):
                writer.writerow([*key, repr(med + jitter)])


def _write_truth_days(spec: SynthSpec, days: list[TruthDay], path: Path) -> None:
    feature_names = [f.name for f in spec.features]
    header = [
        "vehicle_id",
        "date",
        "synth_group",
        "make",
        "model",
        "year",
        "fuel_type",
        "route_type",
        "trip_kms",
        "per_time_city",
        "fuel_l100",
        "clean_fuel_l100",
        "planted_outlier",
        "boost_added",
        "base_fuel",
        "noise_residual",
    ]
    header += [f"value_{n}" for n in feature_names]
    header += [f"contrib_{n}" for n in feature_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for d in days:
            row = [
                d.vehicle_id,
                d.date.isoformat(),
                str(d.synth_group),
                d.make,
                d.model,
                d.year,
                d.fuel_type,
                d.route_type,
                repr(d.trip_kms),
                repr(d.per_time_city),
                repr(d.fuel_l100),
                repr(d.clean_fuel_l100),
                "1" if d.planted_outlier else "0",
                repr(d.boost_added),
                repr(d.base_fuel),
                repr(d.noise_residual),
            ]
            row += [repr(d.feature_values[n]) for n in feature_names]
            row += [repr(d.contributions[n]) for n in feature_names]
            writer.writerow(row)


def _write_truth_savings(spec: SynthSpec, days: list[TruthDay], path: Path) -> None:
    """True per-feature saving vs reference for every generated day.

    Reference is zero for reference-zero features, otherwise the median of
    the feature over the clean (non-planted) days of the same group and
    route.
    """
    medians: dict[tuple[int, str, str], float] = {}
    cell_values: dict[tuple[int, str, str], list[float]] = {}
    for d in days:
        if d.planted_outlier:
            continue
        for name, value in d.feature_values.items():
            cell_values.setdefault((d.synth_group, d.route_type, name), []).append(value)
    for key, values in cell_values.items():
        medians[key] = float(np.median(values))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("vehicle_id", "date", "feature", "true_saving"))
        for d in days:
            for f in spec.features:
                if f.reference_zero:
                    ref = 0.0
                else:
                    ref = medians.get((d.synth_group, d.route_type, f.name), 0.0)
                saving = d.contributions[f.name] - f.contribution(ref)
                if saving > 0:
                    writer.writerow(
                        [d.vehicle_id, d.date.isoformat(), f.name, repr(saving)]
                    )


def read_truth_days(path: str | Path, feature_names: Sequence[str]) -> list[TruthDay]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        days = []
        for row in reader:
            days.append(
                TruthDay(
                    vehicle_id=row["vehicle_id"],
                    date=date_type.fromisoformat(row["date"]),
                    synth_group=int(row["synth_group"]),
                    make=row["make"],
                    model=row["model"],
                    year=row["year"],
                    fuel_type=row["fuel_type"],
                    route_type=row["route_type"],
                    trip_kms=float(row["trip_kms"]),
                    per_time_city=float(row["per_time_city"]),
                    fuel_l100=float(row["fuel_l100"]),
                    clean_fuel_l100=float(row["clean_fuel_l100"]),
                    planted_outlier=row["planted_outlier"] == "1",
                    boost_added=float(row["boost_added"]),
                    base_fuel=float(row["base_fuel"]),
                    noise_residual=float(row["noise_residual"]),
                    feature_values={n: float(row[f"value_{n}"]) for n in feature_names},
                    contributions={n: float(row[f"contrib_{n}"]) for n in feature_names},
                )
            )
    return days
