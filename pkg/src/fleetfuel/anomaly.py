"""Fuel anomaly limits per (vehicle_group, route_type).

Limits are the boxplot whiskers of each group's daily average fuel:
lim_sup = Q3 + 1.5 * IQR and lim_inf = Q1 - 1.5 * IQR.  Cleaning runs in
two phases: the first pass removes implausibly low readings and high-side
noise, the second recomputes the whiskers on the remaining data; that
second upper whisker is the published outlier threshold for the group.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FeedFormatError, InsufficientSupportError
from .ingest import LABEL_INLIER, LABEL_OUTLIER, LABEL_UNASSIGNED, FarRecord

MIN_SUPPORT = 4
WHISKER = 1.5


def quartiles(values: Sequence[float]) -> tuple[float, float]:
    """(Q1, Q3) by linear interpolation over the sorted sample.

    Quartile k sits at fractional position k/4 * (n - 1) among the order
    statistics; fewer than four values cannot support an IQR.
    """
    n = len(values)
    if n < MIN_SUPPORT:
        raise InsufficientSupportError(
            f"need at least {MIN_SUPPORT} values for quartiles, got {n}"
        )
    ordered = sorted(values)

    def at(pos: float) -> float:
        lo = int(pos)
        frac = pos - lo
        if frac == 0.0 or lo + 1 >= n:
            return ordered[lo]
        return ordered[lo] + frac * (ordered[lo + 1] - ordered[lo])

    return at(0.25 * (n - 1)), at(0.75 * (n - 1))


@dataclass(frozen=True)
class AnomalyLimits:
    """Boxplot whiskers for one (vehicle_group, route_type) cell."""

    vehicle_group: int
    route_type: str
    q1: float
    q3: float
    lim_inf: float
    lim_sup: float
    n_support: int
    borrowed: bool = False

    @classmethod
    def from_values(
        cls, vehicle_group: int, route_type: str, values: Sequence[float]
    ) -> "AnomalyLimits":
        q1, q3 = quartiles(values)
        iqr = q3 - q1
        return cls(
            vehicle_group=vehicle_group,
            route_type=route_type,
            q1=q1,
            q3=q3,
            lim_inf=q1 - WHISKER * iqr,
            lim_sup=q3 + WHISKER * iqr,
            n_support=len(values),
        )


class LimitTable:
    """Limits keyed by (vehicle_group, route_type) with fleet fallbacks.

    Cells with fewer than four records borrow the fleet-wide limits of
    their route type (flagged as borrowed); lookups for cells with no
    usable limits return None.
    """

    def __init__(
        self,
        limits: dict[tuple[int, str], AnomalyLimits],
        skipped: Iterable[tuple[int, str]] = (),
    ):
        self._limits = dict(limits)
        self.skipped = sorted(skipped)

    def lookup(self, vehicle_group: int, route_type: str) -> AnomalyLimits | None:
        return self._limits.get((vehicle_group, route_type))

    def __len__(self) -> int:
        return len(self._limits)

    def items(self):
        return sorted(self._limits.items())


def compute_limits(records: Iterable[FarRecord]) -> LimitTable:
    """Whisker limits over avg fuel for every (group, route) cell.

    Fleet-wide per-route limits back small cells; a small cell whose route
    has no fleet-wide support is skipped and flagged.
    """
    by_cell: dict[tuple[int, str], list[float]] = {}
    by_route: dict[str, list[float]] = {}
    for rec in records:
        if rec.avg_fuel_consumption is None:
            continue
        by_cell.setdefault(rec.group_route, []).append(rec.avg_fuel_consumption)
        by_route.setdefault(rec.route_type, []).append(rec.avg_fuel_consumption)

    fleet: dict[str, AnomalyLimits] = {}
    for route, values in by_route.items():
        if len(values) >= MIN_SUPPORT:
            fleet[route] = AnomalyLimits.from_values(-1, route, values)

    limits: dict[tuple[int, str], AnomalyLimits] = {}
    skipped: list[tuple[int, str]] = []
    for (group, route), values in by_cell.items():
        if len(values) >= MIN_SUPPORT:
            limits[(group, route)] = AnomalyLimits.from_values(group, route, values)
        elif route in fleet:
            base = fleet[route]
            limits[(group, route)] = AnomalyLimits(
                vehicle_group=group,
                route_type=route,
                q1=base.q1,
                q3=base.q3,
                lim_inf=base.lim_inf,
                lim_sup=base.lim_sup,
                n_support=base.n_support,
                borrowed=True,
            )
        else:
            skipped.append((group, route))
    return LimitTable(limits, skipped)


@dataclass
class NoiseReport:
    n_low: int = 0
    n_noise: int = 0
    low_days: list[tuple[str, str]] = field(default_factory=list)
    noise_days: list[tuple[str, str]] = field(default_factory=list)
    emptied_cells: list[tuple[int, str]] = field(default_factory=list)


def two_phase_clean(
    records: Sequence[FarRecord],
) -> tuple[list[FarRecord], LimitTable, NoiseReport]:
    """Two-pass whisker cleaning.

    Phase 1 computes limits on the input and removes records below the
    lower whisker (implausibly low fuel) and above the upper whisker
    (noise).  Phase 2 recomputes limits on the survivors; those are the
    published outlier thresholds.
    """
    phase1 = compute_limits(records)
    survivors: list[FarRecord] = []
    report = NoiseReport()
    for rec in records:
        lim = phase1.lookup(rec.vehicle_group, rec.route_type)
        if lim is None or rec.avg_fuel_consumption is None:
            survivors.append(rec)
            continue
        if rec.avg_fuel_consumption < lim.lim_inf:
            report.n_low += 1
            report.low_days.append((rec.vehicle_id, rec.date.isoformat()))
            continue
        if rec.avg_fuel_consumption > lim.lim_sup:
            report.n_noise += 1
            report.noise_days.append((rec.vehicle_id, rec.date.isoformat()))
            continue
        survivors.append(rec)

    final = compute_limits(survivors)
    seen = {key for key, _ in final.items()}
    for key, _ in phase1.items():
        if key not in seen:
            report.emptied_cells.append(key)
    return survivors, final, report


def flag_outliers(records: Iterable[FarRecord], limits: LimitTable) -> list[FarRecord]:
    """Label records against the published upper whisker.

    A day is an outlier only when its fuel strictly exceeds the limit;
    records whose cell has no limits stay unassigned.
    """
    out = []
    for rec in records:
        lim = limits.lookup(rec.vehicle_group, rec.route_type)
        if lim is None or rec.avg_fuel_consumption is None:
            rec.anomaly_label = LABEL_UNASSIGNED
        elif rec.avg_fuel_consumption > lim.lim_sup:
            rec.anomaly_label = LABEL_OUTLIER
        else:
            rec.anomaly_label = LABEL_INLIER
        out.append(rec)
    return out


LIMITS_COLUMNS = (
    "vehicle_group",
    "route_type",
    "q1",
    "q3",
    "lim_inf",
    "lim_sup",
    "n_support",
    "borrowed_flag",
)


def write_limits_csv(limits: LimitTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LIMITS_COLUMNS)
        for (group, route), lim in limits.items():
            writer.writerow(
                [
                    str(group),
                    route,
                    repr(lim.q1),
                    repr(lim.q3),
                    repr(lim.lim_inf),
                    repr(lim.lim_sup),
                    str(lim.n_support),
                    "1" if lim.borrowed else "0",
                ]
            )


def read_limits_csv(path: str | Path) -> LimitTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(LIMITS_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise FeedFormatError(f"{path}: limits table missing {sorted(missing)}")
        limits = {}
        for row in reader:
            lim = AnomalyLimits(
                vehicle_group=int(row["vehicle_group"]),
                route_type=row["route_type"],
                q1=float(row["q1"]),
                q3=float(row["q3"]),
                lim_inf=float(row["lim_inf"]),
                lim_sup=float(row["lim_sup"]),
                n_support=int(row["n_support"]),
                borrowed=row["borrowed_flag"] == "1",
            )
            limits[(lim.vehicle_group, lim.route_type)] = lim
    return LimitTable(limits)
