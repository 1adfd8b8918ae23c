"""Model metrics and domain-knowledge evaluations.

Covers the regression quality check (median per-vehicle MAPE and adjusted
R² with their literature categories), aggregation of explained impact per
factor subcategory against configurable literature limits, the comparison
of explained extra fuel versus the anomaly thresholds (with an internal
signed-rank test), catalog-reference MAPE metrics, and the monthly fuel /
CO2 impact table.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .anomaly import LimitTable
from .errors import DataError
from .explain import ExplanationRow, ReferencePolicy
from .ingest import LABEL_OUTLIER, FarRecord
from .registry import (
    CatalogTable,
    FeatureRegistry,
    SotaLimit,
    UNCHECKED_SUBCATEGORIES,
    VehicleIdentity,
)

CO2_KG_PER_LITER = 2.67633

MAPE_HIGHLY_ACCURATE = "highly_accurate"
MAPE_GOOD = "good"
MAPE_REASONABLE = "reasonable"
MAPE_INACCURATE = "inaccurate"

R2_SUBSTANTIAL = "substantial"
R2_MODERATE = "moderate"
R2_WEAK = "weak"
R2_NONE = "none"


def train_test_split(
    records: Sequence[FarRecord], fraction: float = 0.9, seed: int = 0
) -> tuple[list[FarRecord], list[FarRecord]]:
    """Seeded shuffle then split; both partitions non-empty.

    Records are ordered by (vehicle, date) before shuffling so the split
    does not depend on input ordering.
    """
    if len(records) < 10:
        raise DataError(f"split needs at least 10 records, got {len(records)}")
    if not 0.0 < fraction < 1.0:
        raise DataError("split fraction must be in (0, 1)")
    ordered = sorted(records, key=lambda r: r.day_key)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train = min(max(int(round(len(ordered) * fraction)), 1), len(ordered) - 1)
    train = [ordered[i] for i in perm[:n_train]]
    test = [ordered[i] for i in perm[n_train:]]
    return train, test


def mape(actuals: Sequence[float], predictions: Sequence[float]) -> float:
    """Mean absolute percentage error, in percent.

    Points with a non-positive actual cannot be scored and are excluded.
    """
    pairs = [
        (y, p) for y, p in zip(actuals, predictions, strict=True) if y > 0
    ]
    if not pairs:
        raise DataError("MAPE needs at least one positive actual")
    return float(sum(abs(y - p) / y for y, p in pairs) / len(pairs) * 100.0)


def classify_mape(value: float) -> str:
    """Lewis forecasting category; boundary values take the better class."""
    if value < 0:
        raise DataError("MAPE cannot be negative")
    if value <= 10:
        return MAPE_HIGHLY_ACCURATE
    if value <= 20:
        return MAPE_GOOD
    if value <= 50:
        return MAPE_REASONABLE
    return MAPE_INACCURATE


def median_vehicle_mape(
    records: Sequence[FarRecord], predictions: Sequence[float]
) -> float:
    """Median over vehicles of each vehicle's MAPE."""
    by_vehicle: dict[str, tuple[list[float], list[float]]] = {}
    for rec, pred in zip(records, predictions, strict=True):
        ys, ps = by_vehicle.setdefault(rec.vehicle_id, ([], []))
        ys.append(rec.avg_fuel_consumption or 0.0)
        ps.append(pred)
    values = []
    for ys, ps in by_vehicle.values():
        try:
            values.append(mape(ys, ps))
        except DataError:
            continue
    if not values:
        raise DataError("no vehicle had scoreable records")
    return float(np.median(values))


def adjusted_r2(
    actuals: Sequence[float], predictions: Sequence[float], p: int
) -> tuple[float, str]:
    """Adjusted R² with its Chin category: 1 - (1 - R²)(n - 1)/(n - p - 1)."""
    y = np.asarray(actuals, dtype=np.float64)
    yhat = np.asarray(predictions, dtype=np.float64)
    n = y.size
    if n <= p + 1:
        raise DataError(f"adjusted R² undefined for n={n}, p={p}")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise DataError("target has zero variance")
    r2 = 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - p - 1)
    return adj, classify_r2(adj)


def classify_r2(value: float) -> str:
    if value >= 0.67:
        return R2_SUBSTANTIAL
    if value >= 0.33:
        return R2_MODERATE
    if value >= 0.19:
        return R2_WEAK
    return R2_NONE


@dataclass(frozen=True)
class ModelMetrics:
    fleet: str
    median_vehicle_mape: float
    mape_category: str
    adjusted_r2: float
    r2_category: str
    n_train: int
    n_test: int
    n_predictors: int
    n_unscoreable: int


MODEL_METRICS_COLUMNS = (
    "fleet",
    "median_vehicle_mape",
    "mape_category",
    "adjusted_r2",
    "r2_category",
    "n_train",
    "n_test",
    "n_predictors",
    "n_unscoreable",
)


def model_metrics(
    fleet: str,
    test_records: Sequence[FarRecord],
    predictions: Sequence[float],
    n_predictors: int,
    n_train: int,
) -> ModelMetrics:
    med = median_vehicle_mape(test_records, predictions)
    actuals = [r.avg_fuel_consumption or 0.0 for r in test_records]
    adj, r2_cat = adjusted_r2(actuals, predictions, n_predictors)
    return ModelMetrics(
        fleet=fleet,
        median_vehicle_mape=med,
        mape_category=classify_mape(med),
        adjusted_r2=adj,
        r2_category=r2_cat,
        n_train=n_train,
        n_test=len(test_records),
        n_predictors=n_predictors,
        n_unscoreable=sum(1 for y in actuals if not y > 0),
    )


# ---------------------------------------------------------------------------
# Signed-rank test (internal; exact for small n, normal approximation beyond)

EXACT_LIMIT = 25


def signed_rank_test(differences: Sequence[float]) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Returns (W+, p).  Zero differences are discarded; ties in magnitude get
    average ranks.  Exact sign-flip distribution up to 25 non-zero pairs,
    normal approximation with tie correction and continuity correction
    beyond.
    """
    d = np.asarray([x for x in differences if x != 0.0], dtype=np.float64)
    n = d.size
    if n == 0:
        return 0.0, 1.0
    order = np.argsort(np.abs(d), kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    mags = np.abs(d)[order]
    i = 0
    pos = 1
    while i < n:
        j = i
        while j + 1 < n and mags[j + 1] == mags[i]:
            j += 1
        ranks[order[i : j + 1]] = (pos + (pos + (j - i))) / 2.0
        pos += j - i + 1
        i = j + 1
    w_plus = float(ranks[d > 0].sum())

    if n <= EXACT_LIMIT:
        p = _exact_two_sided(ranks, w_plus)
    else:
        p = _approx_two_sided(ranks, w_plus, n)
    return w_plus, min(1.0, max(0.0, p))


def _exact_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    doubled = np.rint(ranks * 2).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    n_assignments = counts.sum()
    w2 = int(round(w_plus * 2))
    p_low = counts[: w2 + 1].sum() / n_assignments
    p_high = counts[w2:].sum() / n_assignments
    return 2.0 * min(p_low, p_high)


def _approx_two_sided(ranks: np.ndarray, w_plus: float, n: int) -> float:
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    if var <= 0:
        return 1.0
    diff = w_plus - mu
    z = (diff - math.copysign(0.5, diff)) / math.sqrt(var) if diff != 0 else 0.0
    return 2.0 * (1.0 - 0.5 * (1.0 + math.erf(abs(z) / math.sqrt(2.0))))


# ---------------------------------------------------------------------------
# Category impact vs literature limits


@dataclass(frozen=True)
class CategoryImpact:
    category: str
    subcategory: str
    fleet: str
    median_impact_pct: float
    n_days: int
    min_pct: float | None
    max_pct: float | None
    verdict: str | None


def aggregate_category_impact(
    rows: Sequence[ExplanationRow],
    registry: FeatureRegistry,
    sota_limits: Mapping[tuple[str, str], SotaLimit],
    fleet: str,
) -> list[CategoryImpact]:
    """Median per-day relative impact per (category, subcategory).

    Per day, a subcategory's impact is the sum of its rows' savings over
    the day's fuel; the median is taken over days where the subcategory
    appears.  Subcategories outside the limits config, plus the unchecked
    ones, are reported without a verdict.
    """
    per_day: dict[tuple, dict[tuple[str, str], float]] = {}
    for row in rows:
        spec = registry.get(row.feature)
        if spec is None:
            continue
        impacts = per_day.setdefault(row.day_key, {})
        key = (spec.category, spec.subcategory)
        impacts[key] = impacts.get(key, 0.0) + row.y_diff / row.avg_fuel_consumption

    buckets: dict[tuple[str, str], list[float]] = {}
    for impacts in per_day.values():
        for key, value in impacts.items():
            buckets.setdefault(key, []).append(value * 100.0)

    out = []
    for key in sorted(buckets):
        values = buckets[key]
        median = float(np.median(values))
        limit = sota_limits.get(key)
        if key[1] in UNCHECKED_SUBCATEGORIES or limit is None:
            verdict = None
            min_pct = max_pct = None
        else:
            min_pct, max_pct = limit.min_pct, limit.max_pct
            if median < min_pct:
                verdict = "below_min"
            elif median > max_pct:
                verdict = "above_max"
            else:
                verdict = "within"
        out.append(
            CategoryImpact(
                category=key[0],
                subcategory=key[1],
                fleet=fleet,
                median_impact_pct=median,
                n_days=len(values),
                min_pct=min_pct,
                max_pct=max_pct,
                verdict=verdict,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Explained extra fuel vs anomaly thresholds


@dataclass(frozen=True)
class OutlierComparison:
    fleet: str
    n_outlier_days: int
    median_explained: float
    median_anomalous: float
    w_statistic: float
    p_value: float


def outlier_vs_explained(
    rows: Sequence[ExplanationRow],
    limits: LimitTable,
    records: Sequence[FarRecord],
    fleet: str,
) -> OutlierComparison | None:
    """Per outlier day, explained extra vs whisker excess, with a rank test.

    Explained extra fuel is the day's total claimed saving over its fuel;
    anomalous extra is the excess over the published threshold, relative to
    the same fuel.  Days without surviving explanations count as explaining
    nothing.  Returns None when the fleet has no outlier days.
    """
    explained_by_day: dict[tuple, float] = {}
    for row in rows:
        explained_by_day[row.day_key] = explained_by_day.get(row.day_key, 0.0) + row.y_diff

    explained: list[float] = []
    anomalous: list[float] = []
    for rec in sorted(records, key=lambda r: r.day_key):
        if rec.anomaly_label != LABEL_OUTLIER or rec.avg_fuel_consumption is None:
            continue
        lim = limits.lookup(rec.vehicle_group, rec.route_type)
        if lim is None:
            continue
        avg = rec.avg_fuel_consumption
        explained.append(explained_by_day.get(rec.day_key, 0.0) / avg)
        anomalous.append((avg - lim.lim_sup) / avg)
    if not explained:
        return None
    diffs = [e - a for e, a in zip(explained, anomalous)]
    w, p = signed_rank_test(diffs)
    return OutlierComparison(
        fleet=fleet,
        n_outlier_days=len(explained),
        median_explained=float(np.median(explained)),
        median_anomalous=float(np.median(anomalous)),
        w_statistic=w,
        p_value=p,
    )


# ---------------------------------------------------------------------------
# Catalog comparison


@dataclass(frozen=True)
class CatalogMapeReport:
    fleet: str
    mape_1: float | None
    mape_2: float | None
    mape_3: float | None
    pct_mape1_lt_50: float | None
    pct_mape1_lt_20: float | None
    pct_mape1_lt_10: float | None
    pct_mape2_lt_50: float | None
    pct_mape2_lt_20: float | None
    pct_mape2_lt_10: float | None
    pct_below_catalog: float | None
    n_days: int
    n_catalog_days: int
    n_unmatched: int


def _share_below(values: list[float], cutoff: float) -> float:
    return 100.0 * sum(1 for v in values if v < cutoff) / len(values)


def catalog_mape(
    rows: Sequence[ExplanationRow],
    records: Sequence[FarRecord],
    identities: Mapping[str, VehicleIdentity],
    catalog: CatalogTable,
    policy: ReferencePolicy,
    fleet: str,
    offset: float = 1.0,
) -> CatalogMapeReport:
    """Projected fuel vs catalog and inlier-median references.

    mape_1 compares each explained day's projected fuel to the catalog for
    the vehicle's identity and route; mape_2 compares it to the inlier
    median of the day's group and route; mape_3 restricts mape_2 to
    outlier days.  pct_below_catalog counts days projected more than the
    offset below the catalog value (physically unreachable targets).
    Vehicles with no catalog identity are excluded from the catalog
    comparison and counted.
    """
    day_rows: dict[tuple, ExplanationRow] = {}
    for row in rows:
        day_rows.setdefault(row.day_key, row)
    label_by_day = {rec.day_key: rec.anomaly_label for rec in records}

    mape1: list[float] = []
    mape2: list[float] = []
    mape3: list[float] = []
    below = 0
    n_catalog_days = 0
    unmatched = 0
    for key in sorted(day_rows):
        row = day_rows[key]
        y_new = row.y_fuel_new
        ident = identities.get(row.vehicle_id)
        ref = catalog.lookup(ident, row.route_type) if ident is not None else None
        if ref is None:
            unmatched += 1
        else:
            n_catalog_days += 1
            mape1.append(abs(y_new - ref) / ref)
            if y_new < ref - offset:
                below += 1
        med = policy.fuel_median(row.vehicle_group, row.route_type)
        if med is not None and med > 0:
            value = abs(y_new - med) / med
            mape2.append(value)
            if label_by_day.get(key) == LABEL_OUTLIER:
                mape3.append(value)

    return CatalogMapeReport(
        fleet=fleet,
        mape_1=float(np.median(mape1)) if mape1 else None,
        mape_2=float(np.median(mape2)) if mape2 else None,
        mape_3=float(np.median(mape3)) if mape3 else None,
        pct_mape1_lt_50=_share_below(mape1, 0.5) if mape1 else None,
        pct_mape1_lt_20=_share_below(mape1, 0.2) if mape1 else None,
        pct_mape1_lt_10=_share_below(mape1, 0.1) if mape1 else None,
        pct_mape2_lt_50=_share_below(mape2, 0.5) if mape2 else None,
        pct_mape2_lt_20=_share_below(mape2, 0.2) if mape2 else None,
        pct_mape2_lt_10=_share_below(mape2, 0.1) if mape2 else None,
        pct_below_catalog=(100.0 * below / n_catalog_days) if n_catalog_days else None,
        n_days=len(day_rows),
        n_catalog_days=n_catalog_days,
        n_unmatched=unmatched,
    )


# ---------------------------------------------------------------------------
# Monthly impact


@dataclass(frozen=True)
class MonthlyImpact:
    fleet: str
    month: str
    total_fuel_l: float
    extra_fuel_all_l: float
    extra_fuel_behaviour_l: float
    co2_kg: float
    cost: float | None = None


def monthly_impact(
    rows: Sequence[ExplanationRow],
    records: Sequence[FarRecord],
    registry: FeatureRegistry,
    fleet: str,
    co2_per_liter: float = CO2_KG_PER_LITER,
    price_per_liter: float | None = None,
    behaviour_category: str = "Driving Behaviour",
) -> list[MonthlyImpact]:
    """Fuel burned, claimed extra liters and the CO2 behind the behaviour part.

    Extra liters for a row are its saving per 100 km scaled by the day's
    distance; the CO2 column converts the driving-behaviour share.
    """
    kms_by_day = {rec.day_key: rec.trip_kms for rec in records}
    total: dict[str, float] = {}
    for rec in records:
        if rec.trip_fuel_used is None:
            continue
        month = f"{rec.date.year:04d}-{rec.date.month:02d}"
        total[month] = total.get(month, 0.0) + rec.trip_fuel_used

    extra_all: dict[str, float] = {}
    extra_beh: dict[str, float] = {}
    for row in rows:
        kms = kms_by_day.get(row.day_key)
        if kms is None:
            continue
        liters = row.y_diff * kms / 100.0
        month = f"{row.date_tx.year:04d}-{row.date_tx.month:02d}"
        extra_all[month] = extra_all.get(month, 0.0) + liters
        spec = registry.get(row.feature)
        if spec is not None and spec.category == behaviour_category:
            extra_beh[month] = extra_beh.get(month, 0.0) + liters

    out = []
    for month in sorted(total):
        beh = extra_beh.get(month, 0.0)
        alle = extra_all.get(month, 0.0)
        out.append(
            MonthlyImpact(
                fleet=fleet,
                month=month,
                total_fuel_l=total[month],
                extra_fuel_all_l=alle,
                extra_fuel_behaviour_l=beh,
                co2_kg=beh * co2_per_liter,
                cost=None if price_per_liter is None else alle * price_per_liter,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Report output


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_json(payload, path: str | Path) -> None:
    def default(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return asdict(obj)
        raise TypeError(f"cannot serialize {type(obj)!r}")

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")


def write_report_csv(items: Iterable, columns: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for item in items:
            data = asdict(item) if hasattr(item, "__dataclass_fields__") else dict(item)
            writer.writerow([_csv_cell(data.get(col)) for col in columns])
