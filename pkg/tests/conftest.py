"""Shared fixtures: a small feature registry and record builders."""

from __future__ import annotations

from datetime import date

import pytest

from fleetfuel.ingest import FarRecord
from fleetfuel.registry import FeatureRegistry, FeatureSpec


def make_registry(specs=None) -> FeatureRegistry:
    if specs is None:
        specs = [
            FeatureSpec(
                name="rpm_high",
                unit="events",
                aggregator="sum",
                impact_type="Positive",
                reference_zero=True,
                category="Driving Behaviour",
                subcategory="Aggressive Driving",
                actionable=True,
            ),
            FeatureSpec(
                name="mean_speed_hwy",
                unit="km/h",
                aggregator="mean",
                impact_type="Positive",
                reference_zero=False,
                category="Driving Behaviour",
                subcategory="Aggressive Driving",
                actionable=True,
            ),
            FeatureSpec(
                name="mean_exterior_temp",
                unit="K",
                aggregator="mean",
                impact_type="Negative",
                reference_zero=False,
                category="Weather Conditions",
                subcategory="Ambient Temperature",
                actionable=True,
            ),
        ]
    return FeatureRegistry(specs)


def make_record(
    vehicle_id="v1",
    day="2021-01-05",
    features=None,
    trip_kms=50.0,
    trip_fuel_used=5.0,
    per_time_city=0.4,
    route_type="highway",
    vehicle_group=0,
    avg=None,
    label="unassigned",
) -> FarRecord:
    rec = FarRecord(
        vehicle_id=vehicle_id,
        date=date.fromisoformat(day),
        features=dict(features or {}),
        trip_kms=trip_kms,
        trip_fuel_used=trip_fuel_used,
        per_time_city=per_time_city,
        route_type=route_type,
        vehicle_group=vehicle_group,
        anomaly_label=label,
    )
    if avg is not None:
        rec.avg_fuel_consumption = avg
    elif trip_fuel_used is not None and trip_kms and trip_kms > 0:
        rec.avg_fuel_consumption = trip_fuel_used / trip_kms * 100.0
    return rec


@pytest.fixture
def small_registry() -> FeatureRegistry:
    return make_registry()
