"""Raw telemetry feed to daily Fleet Analytics Records.

The feed is a CSV of (time_tx, vehicle_id, variable_id, variable_value)
samples.  This module parses it, aggregates samples into one record per
vehicle and calendar day, classifies the day's route context, resolves
vehicle identities and classes, applies data-quality filters and fills
missing feature values from group medians.

Channel naming: a feed variable_id either names a feature declared in the
registry (aggregated by that feature's declared aggregator) or one of the
three core channels below, which feed the record's dedicated fields.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

from .errors import DataError, FeedFormatError
from .registry import FeatureRegistry, VehicleClassRow, VehicleIdentity

logger = logging.getLogger(__name__)

FEED_COLUMNS = ("time_tx", "vehicle_id", "variable_id", "variable_value")

# Core channels consumed into dedicated FarRecord fields.
TRIP_FUEL_CHANNEL = "TripFuel"
TRIP_KMS_CHANNEL = "TripKms"
CITY_TIME_CHANNEL = "PerTimeCity"
CORE_CHANNELS = {TRIP_FUEL_CHANNEL, TRIP_KMS_CHANNEL, CITY_TIME_CHANNEL}

ROUTE_CITY = "city"
ROUTE_COMBINED = "combined"
ROUTE_HIGHWAY = "highway"
ROUTE_TYPES = (ROUTE_CITY, ROUTE_COMBINED, ROUTE_HIGHWAY)

LABEL_INLIER = "inlier"
LABEL_OUTLIER = "outlier"
LABEL_NOISE = "noise"
LABEL_UNASSIGNED = "unassigned"

MIN_TRIP_KMS = 5.0


@dataclass(frozen=True)
class RawReading:
    """One timestamped telemetry sample."""

    time_tx: datetime
    vehicle_id: str
    variable_id: str
    variable_value: float


@dataclass
class FarRecord:
    """Aggregated daily record for one vehicle."""

    vehicle_id: str
    date: date
    features: dict[str, float] = field(default_factory=dict)
    trip_kms: float | None = None
    trip_fuel_used: float | None = None
    per_time_city: float | None = None
    avg_fuel_consumption: float | None = None
    route_type: str = ROUTE_COMBINED
    vehicle_group: int = -1
    vehicle_class: int = 0
    anomaly_label: str = LABEL_UNASSIGNED

    @property
    def day_key(self) -> tuple[str, date]:
        return (self.vehicle_id, self.date)

    @property
    def group_route(self) -> tuple[int, str]:
        return (self.vehicle_group, self.route_type)


@dataclass(frozen=True)
class RouteThresholds:
    """Distance / city-time thresholds for the route classifier."""

    th_kms: float = 30.0
    low_th_time: float = 0.5
    high_th_time: float = 0.65


@dataclass
class ParsedFeed:
    readings: list[RawReading]
    rejects: dict[str, int]

    @property
    def n_rejected(self) -> int:
        return sum(self.rejects.values())


def _parse_timestamp(raw: str) -> datetime:
    text = raw.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def parse_feed(stream: TextIO | Iterable[str]) -> ParsedFeed:
    """Parse the raw CSV feed, keeping row order.

    Malformed rows (bad timestamp, non-numeric or non-finite value, wrong
    field count) are dropped and counted by reason.  A missing or wrong
    header is fatal.
    """
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise FeedFormatError("feed is empty: missing header row") from None
    names = tuple(h.strip() for h in header)
    if set(names) != set(FEED_COLUMNS):
        raise FeedFormatError(
            f"feed header {list(names)} does not match expected {list(FEED_COLUMNS)}"
        )
    idx = {name: names.index(name) for name in FEED_COLUMNS}

    readings: list[RawReading] = []
    rejects = {"bad_field_count": 0, "bad_timestamp": 0, "bad_value": 0}
    for row in reader:
        if not row:
            continue
        if len(row) != len(names):
            rejects["bad_field_count"] += 1
            continue
        try:
            ts = _parse_timestamp(row[idx["time_tx"]])
        except ValueError:
            rejects["bad_timestamp"] += 1
            continue
        try:
            value = float(row[idx["variable_value"]])
        except ValueError:
            rejects["bad_value"] += 1
            continue
        if not math.isfinite(value):
            rejects["bad_value"] += 1
            continue
        readings.append(
            RawReading(
                time_tx=ts,
                vehicle_id=row[idx["vehicle_id"]].strip(),
                variable_id=row[idx["variable_id"]].strip(),
                variable_value=value,
            )
        )
    return ParsedFeed(readings=readings, rejects=rejects)


def parse_feed_csv(path: str | Path) -> ParsedFeed:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_feed(fh)


def _aggregate(values: list[tuple[datetime, float]], how: str) -> float:
    """Aggregate one day's samples of one channel, order-independently."""
    ordered = sorted(v for _, v in values)
    if how == "sum":
        return float(sum(ordered))
    if how == "mean":
        return float(sum(ordered) / len(ordered))
    if how == "max":
        return ordered[-1]
    if how == "count":
        return float(len(ordered))
    if how == "last":
        return max(values)[1]
    raise DataError(f"unknown aggregator {how!r}")


@dataclass
class AggregateReport:
    unknown_channels: dict[str, int] = field(default_factory=dict)
    n_records: int = 0
    n_readings: int = 0


def aggregate_daily(
    readings: Sequence[RawReading],
    registry: FeatureRegistry,
    ignore: Iterable[str] = (),
) -> tuple[list[FarRecord], AggregateReport]:
    """Group readings into one FarRecord per (vehicle, UTC calendar day).

    Each registry feature is reduced by its declared aggregator; the three
    core channels fill trip_kms / trip_fuel_used / per_time_city.  Channels
    neither declared nor ignored are skipped with a warning.
    """
    ignore_set = set(ignore)
    buckets: dict[tuple[str, date], dict[str, list[tuple[datetime, float]]]] = {}
    report = AggregateReport(n_readings=len(readings))
    for r in readings:
        known = r.variable_id in registry or r.variable_id in CORE_CHANNELS
        if not known:
            if r.variable_id not in ignore_set:
                if r.variable_id not in report.unknown_channels:
                    logger.warning("unknown channel %r skipped", r.variable_id)
                    report.unknown_channels[r.variable_id] = 0
                report.unknown_channels[r.variable_id] += 1
            continue
        day = r.time_tx.date()
        buckets.setdefault((r.vehicle_id, day), {}).setdefault(
            r.variable_id, []
        ).append((r.time_tx, r.variable_value))

    records = []
    for (vehicle_id, day), channels in sorted(buckets.items()):
        rec = FarRecord(vehicle_id=vehicle_id, date=day)
        for channel, samples in channels.items():
            if channel == TRIP_FUEL_CHANNEL:
                rec.trip_fuel_used = _aggregate(samples, "sum")
            elif channel == TRIP_KMS_CHANNEL:
                rec.trip_kms = _aggregate(samples, "sum")
            elif channel == CITY_TIME_CHANNEL:
                rec.per_time_city = _aggregate(samples, "mean")
            else:
                rec.features[channel] = _aggregate(samples, registry[channel].aggregator)
        records.append(rec)
    report.n_records = len(records)
    return records, report


def compute_avg_fuel(trip_fuel_used: float, trip_kms: float) -> float:
    """Average fuel consumption in L/100 km."""
    if not trip_kms > 0:
        raise DataError(f"trip_kms must be positive, got {trip_kms}")
    return trip_fuel_used / trip_kms * 100.0


def classify_route(
    per_time_city: float,
    trip_kms: float,
    thresholds: RouteThresholds = RouteThresholds(),
) -> str:
    """Daily route context from city-time fraction and trip distance."""
    if per_time_city <= thresholds.low_th_time and trip_kms >= thresholds.th_kms:
        return ROUTE_HIGHWAY
    if per_time_city >= thresholds.high_th_time and trip_kms <= thresholds.th_kms:
        return ROUTE_CITY
    return ROUTE_COMBINED


def enrich_records(
    records: Iterable[FarRecord],
    identities: Mapping[str, VehicleIdentity],
    thresholds: RouteThresholds = RouteThresholds(),
) -> list[FarRecord]:
    """Fill avg fuel, route type and vehicle_group on aggregated records.

    Records with an unusable distance keep avg_fuel_consumption = None and
    are left for the quality filter to remove.  A day without a city-time
    fraction cannot be placed at either extreme and falls in 'combined'.
    """
    out = []
    for rec in records:
        if rec.trip_fuel_used is not None and rec.trip_kms is not None and rec.trip_kms > 0:
            rec.avg_fuel_consumption = compute_avg_fuel(rec.trip_fuel_used, rec.trip_kms)
        if rec.trip_kms is not None and rec.per_time_city is not None:
            rec.route_type = classify_route(rec.per_time_city, rec.trip_kms, thresholds)
        else:
            rec.route_type = ROUTE_COMBINED
        ident = identities.get(rec.vehicle_id)
        if ident is not None:
            rec.vehicle_group = ident.vehicle_group
        out.append(rec)
    return out


def assign_vehicle_class(
    group_median_fuel: float, class_table: Sequence[VehicleClassRow]
) -> int:
    """Class id whose fuel interval contains the value (lowest id on ties).

    Values below every interval clamp to the lowest class, above every
    interval to the highest; a value falling in a gap between intervals is
    assigned to the nearest interval (lower id on distance ties).
    """
    for row in class_table:
        if row.l100km_min <= group_median_fuel <= row.l100km_max:
            return row.vehicle_class
    if group_median_fuel < min(r.l100km_min for r in class_table):
        return class_table[0].vehicle_class
    if group_median_fuel > max(r.l100km_max for r in class_table):
        return class_table[-1].vehicle_class
    best = min(
        class_table,
        key=lambda r: (
            min(
                abs(group_median_fuel - r.l100km_min),
                abs(group_median_fuel - r.l100km_max),
            ),
            r.vehicle_class,
        ),
    )
    return best.vehicle_class


def _median(values: list[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    return ordered[mid] if n % 2 else (ordered[mid - 1] + ordered[mid]) / 2.0


def assign_classes(
    records: Iterable[FarRecord], class_table: Sequence[VehicleClassRow]
) -> dict[int, int]:
    """Assign every record its group's class from the group median fuel."""
    by_group: dict[int, list[float]] = {}
    recs = list(records)
    for rec in recs:
        if rec.avg_fuel_consumption is not None:
            by_group.setdefault(rec.vehicle_group, []).append(rec.avg_fuel_consumption)
    classes = {
        group: assign_vehicle_class(_median(vals), class_table)
        for group, vals in by_group.items()
    }
    for rec in recs:
        rec.vehicle_class = classes.get(rec.vehicle_group, 0)
    return classes


@dataclass
class RemovalReport:
    reasons: dict[str, int] = field(default_factory=dict)

    def count(self, reason: str) -> None:
        self.reasons[reason] = self.reasons.get(reason, 0) + 1

    @property
    def n_removed(self) -> int:
        return sum(self.reasons.values())


def quality_filter(
    records: Iterable[FarRecord],
    lower_limits=None,
    upper_noise_limits=None,
) -> tuple[list[FarRecord], RemovalReport]:
    """Drop records unusable for modelling; count each removal reason.

    Removes records with a missing or short trip (< 5 km), missing fuel,
    fuel below the group's lower whisker, or fuel above the group's noise
    whisker.  Both limit arguments are optional lookup tables keyed by
    (vehicle_group, route_type); records removed on the noise side are
    marked with the noise label.
    """
    kept: list[FarRecord] = []
    report = RemovalReport()
    for rec in records:
        if rec.trip_kms is None:
            report.count("missing_distance")
            continue
        if rec.trip_kms < MIN_TRIP_KMS:
            report.count("low_distance")
            continue
        if rec.trip_fuel_used is None or rec.avg_fuel_consumption is None:
            report.count("missing_fuel")
            continue
        if lower_limits is not None:
            lim = lower_limits.lookup(rec.vehicle_group, rec.route_type)
            if lim is not None and rec.avg_fuel_consumption < lim.lim_inf:
                report.count("low_fuel")
                continue
        if upper_noise_limits is not None:
            lim = upper_noise_limits.lookup(rec.vehicle_group, rec.route_type)
            if lim is not None and rec.avg_fuel_consumption > lim.lim_sup:
                rec.anomaly_label = LABEL_NOISE
                report.count("noise_fuel")
                continue
        kept.append(rec)
    return kept, report


def impute_missing(
    records: Sequence[FarRecord], registry: FeatureRegistry
) -> list[FarRecord]:
    """Fill missing feature values: group median, then fleet median, then 0.

    Observed values are never altered.  After this pass every registry
    feature is present on every record.
    """
    group_values: dict[tuple[int, str], list[float]] = {}
    fleet_values: dict[str, list[float]] = {}
    for rec in records:
        for name, value in rec.features.items():
            group_values.setdefault((rec.vehicle_group, name), []).append(value)
            fleet_values.setdefault(name, []).append(value)

    group_median = {key: _median(vals) for key, vals in group_values.items()}
    fleet_median = {name: _median(vals) for name, vals in fleet_values.items()}

    for rec in records:
        for name in registry.names:
            if name in rec.features:
                continue
            value = group_median.get((rec.vehicle_group, name))
            if value is None:
                value = fleet_median.get(name)
            if value is None:
                value = 0.0
            rec.features[name] = value
    return list(records)


# ---------------------------------------------------------------------------
# FAR CSV round trip

FAR_FIXED_COLUMNS = (
    "vehicle_id",
    "date",
    "route_type",
    "vehicle_group",
    "vehicle_class",
    "anomaly_label",
    "trip_kms",
    "trip_fuel_used",
    "per_time_city",
    "avg_fuel_consumption",
)


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(value)


def write_far_csv(
    records: Iterable[FarRecord], registry: FeatureRegistry, path: str | Path
) -> None:
    """One row per vehicle-day, fixed columns then registry features."""
    names = registry.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FAR_FIXED_COLUMNS + names)
        for rec in sorted(records, key=lambda r: r.day_key):
            row = [
                rec.vehicle_id,
                rec.date.isoformat(),
                rec.route_type,
                str(rec.vehicle_group),
                str(rec.vehicle_class),
                rec.anomaly_label,
                _fmt(rec.trip_kms),
                _fmt(rec.trip_fuel_used),
                _fmt(rec.per_time_city),
                _fmt(rec.avg_fuel_consumption),
            ]
            row.extend(_fmt(rec.features.get(name)) for name in names)
            writer.writerow(row)


def read_far_csv(path: str | Path, registry: FeatureRegistry) -> list[FarRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FeedFormatError(f"{path}: empty FAR file")
        expected = list(FAR_FIXED_COLUMNS + registry.names)
        if header != expected:
            extra = sorted(set(header) - set(expected))
            missing = sorted(set(expected) - set(header))
            raise FeedFormatError(
                f"{path}: FAR columns mismatch (missing {missing}, unexpected {extra})"
            )
        records = []
        for row in reader:
            vals = dict(zip(header, row))
            rec = FarRecord(
                vehicle_id=vals["vehicle_id"],
                date=date.fromisoformat(vals["date"]),
                route_type=vals["route_type"],
                vehicle_group=int(vals["vehicle_group"]),
                vehicle_class=int(vals["vehicle_class"]),
                anomaly_label=vals["anomaly_label"],
                trip_kms=float(vals["trip_kms"]) if vals["trip_kms"] else None,
                trip_fuel_used=(
                    float(vals["trip_fuel_used"]) if vals["trip_fuel_used"] else None
                ),
                per_time_city=(
                    float(vals["per_time_city"]) if vals["per_time_city"] else None
                ),
                avg_fuel_consumption=(
                    float(vals["avg_fuel_consumption"])
                    if vals["avg_fuel_consumption"]
                    else None
                ),
            )
            for name in registry.names:
                if vals[name] != "":
                    rec.features[name] = float(vals[name])
            records.append(rec)
    return records
