"""Reference values, savings, explanation generation and business rules."""

from __future__ import annotations

from datetime import date

import numpy as np
import pytest

from fleetfuel.anomaly import compute_limits
from fleetfuel.explain import (
    BR_ORDER,
    ExplanationRow,
    ReferencePolicy,
    apply_business_rules,
    fuel_saving,
    generate_daily_explanations,
    read_explanations_csv,
    recompute_fuel_new,
    reference_value,
    write_explanations_csv,
    write_inlier_medians_csv,
)
from fleetfuel.gam import AdditiveModel, FeatureColumn, TrainConfig

from .conftest import make_record


def step_model(shapes: dict[str, tuple[list[float], list[float]]], intercept=7.0,
               indicators: dict[str, list[str]] | None = None) -> AdditiveModel:
    """Hand-built model: numeric step shapes plus optional indicator sets."""
    columns, cuts, values = [], [], []
    for name, (c, v) in shapes.items():
        columns.append(FeatureColumn(name=name, kind="numeric", origin=name))
        cuts.append(np.asarray(c, dtype=float))
        values.append(np.asarray(v, dtype=float))
    for origin, levels in (indicators or {}).items():
        for i, level in enumerate(levels):
            columns.append(
                FeatureColumn(name=f"{origin}={level}", kind="indicator", origin=origin, level=level)
            )
            cuts.append(np.asarray([0.5]))
            # active level i contributes 0.05 * i at value 1, 0 at value 0
            values.append(np.asarray([0.0, 0.05 * i]))
    return AdditiveModel(
        intercept=intercept, columns=columns, cuts=cuts, values=values, config=TrainConfig()
    )


def inlier_pool(registry):
    """Inlier records giving mean_speed_hwy a median of 75.73."""
    speeds = [70.0, 75.73, 80.0]
    records = []
    for i, s in enumerate(speeds):
        records.append(
            make_record(
                vehicle_id=f"in{i}",
                avg=8.0 + 0.1 * i,
                label="inlier",
                features={"rpm_high": 2.0 + i, "mean_speed_hwy": s, "mean_exterior_temp": 285.0 + i},
            )
        )
    return records


class TestReferenceValue:
    def test_reference_zero_feature(self, small_registry):
        assert reference_value("rpm_high", 0, "highway", small_registry, inlier_pool(small_registry)) == 0.0

    def test_median_inlier_feature(self, small_registry):
        ref = reference_value("mean_speed_hwy", 0, "highway", small_registry, inlier_pool(small_registry))
        assert ref == 75.73

    def test_fleet_fallback(self, small_registry):
        pool = [
            make_record(vehicle_id="other", vehicle_group=9, route_type="city", label="inlier",
                        features={"mean_speed_hwy": 5.0})
        ]
        ref = reference_value("mean_speed_hwy", 0, "highway", small_registry, pool)
        assert ref == 5.0

    def test_kind_matches_registry_flag(self, small_registry):
        policy = ReferencePolicy.from_records(small_registry, inlier_pool(small_registry))
        assert policy.reference_kind("rpm_high") == "zero"
        assert policy.reference_kind("mean_speed_hwy") == "median_inlier"


class TestFuelSaving:
    def test_direct_difference(self, small_registry):
        model = step_model({"rpm_high": ([5.0], [0.2, 0.5])})
        rec = make_record(features={"rpm_high": 9.0})
        assert fuel_saving(model, rec, "rpm_high", 0.0) == pytest.approx(0.3)

    def test_identity_at_reference(self, small_registry):
        model = step_model({"rpm_high": ([5.0], [0.2, 0.5])})
        rec = make_record(features={"rpm_high": 2.0})
        assert fuel_saving(model, rec, "rpm_high", 2.0) == 0.0

    def test_negative_saving_possible(self):
        model = step_model({"mean_speed_hwy": ([80.0], [0.5, 0.1])})
        rec = make_record(features={"mean_speed_hwy": 90.0})
        assert fuel_saving(model, rec, "mean_speed_hwy", 70.0) == pytest.approx(-0.4)


def explanation_setup(small_registry):
    """Model + labeled records where v-high has savings on all three features."""
    model = step_model(
        {
            "rpm_high": ([5.0], [0.0, 0.6]),
            "mean_speed_hwy": ([85.0], [0.0, 0.9]),
            "mean_exterior_temp": ([280.0], [0.4, 0.0]),
        },
        intercept=7.25,
    )
    inliers = []
    for i in range(5):
        inliers.append(
            make_record(
                vehicle_id=f"in{i}",
                avg=7.0 + 0.05 * i,
                label="inlier",
                features={"rpm_high": 1.0, "mean_speed_hwy": 75.0 + i, "mean_exterior_temp": 284.0 + i},
            )
        )
    target = make_record(
        vehicle_id="vhigh",
        avg=9.96,
        label="outlier",
        features={"rpm_high": 9.0, "mean_speed_hwy": 99.5, "mean_exterior_temp": 275.0},
    )
    limits = compute_limits(
        [make_record(vehicle_id=f"l{i}", avg=f) for i, f in enumerate([7.0, 7.1, 7.2, 7.3])]
    )
    policy = ReferencePolicy.from_records(small_registry, inliers)
    return model, inliers, target, limits, policy


class TestGenerateDailyExplanations:
    def test_rows_and_fuel_new(self, small_registry):
        model, inliers, target, limits, policy = explanation_setup(small_registry)
        rows = generate_daily_explanations(model, [target], policy, limits)
        by_feature = {r.feature: r for r in rows}
        # rpm_high: f(9)=0.6 vs f(0)=0.0; speed: f(99.5)=0.9 vs f(76)=0; temp: f(275)=0.4 vs f(285)=0
        assert by_feature["rpm_high"].y_diff == pytest.approx(0.6)
        assert by_feature["mean_speed_hwy"].y_diff == pytest.approx(0.9)
        assert by_feature["mean_exterior_temp"].y_diff == pytest.approx(0.4)
        total = 0.6 + 0.9 + 0.4
        for row in rows:
            assert row.y_fuel_new == pytest.approx(9.96 - total)
            assert row.intercept == 7.25
            assert row.y_pred == pytest.approx(model.predict(target))
            assert row.limit_group == limits.lookup(0, "highway").lim_sup

    def test_record_at_reference_everywhere(self, small_registry):
        model, inliers, _, limits, policy = explanation_setup(small_registry)
        resting = make_record(
            vehicle_id="calm",
            avg=7.0,
            features={"rpm_high": 0.0, "mean_speed_hwy": 76.0, "mean_exterior_temp": 286.0},
        )
        rows = generate_daily_explanations(model, [resting], policy, limits)
        assert rows == []

    def test_locality_under_unrelated_vehicles(self, small_registry):
        model, inliers, target, limits, policy = explanation_setup(small_registry)
        alone = generate_daily_explanations(model, [target], policy, limits)
        other = make_record(
            vehicle_id="zzz",
            avg=8.5,
            features={"rpm_high": 7.0, "mean_speed_hwy": 90.0, "mean_exterior_temp": 279.0},
        )
        both = generate_daily_explanations(model, [target, other], policy, limits)
        mine = [r for r in both if r.vehicle_id == "vhigh"]
        assert mine == alone

    def test_target_values_follow_policy(self, small_registry):
        model, inliers, target, limits, policy = explanation_setup(small_registry)
        rows = generate_daily_explanations(model, [target], policy, limits)
        by_feature = {r.feature: r for r in rows}
        assert by_feature["rpm_high"].target_value == 0.0
        assert by_feature["mean_speed_hwy"].target_value == 77.0  # median of 75..79


def base_row(**overrides):
    defaults = dict(
        vehicle_id="v1",
        date_tx=date(2020, 4, 17),
        route_type="highway",
        vehicle_group=0,
        intercept=7.25,
        feature="rpm_high",
        feature_relevance=0.6,
        feature_value=9.0,
        target_value=0.0,
        avg_fuel_consumption=9.96,
        limit_group=9.35,
        y_pred=10.39,
        y_diff=0.5,
        y_fuel_new=0.0,
    )
    defaults.update(overrides)
    return ExplanationRow(**defaults)


class TestBusinessRules:
    def policy(self, small_registry):
        return ReferencePolicy.from_records(small_registry, inlier_pool(small_registry))

    def test_br1_drops_categorical(self, small_registry):
        rows = [base_row(feature="vehicle_group", feature_value="14", target_value="0")]
        kept, audit = apply_business_rules(rows, self.policy(small_registry))
        assert kept == []
        assert audit[0].rule_id == "BR1"

    def test_br2_drops_below_one_percent(self, small_registry):
        rows = [base_row(avg_fuel_consumption=10.0, y_diff=0.05, feature_value=9.0)]
        kept, audit = apply_business_rules(rows, self.policy(small_registry))
        assert kept == []
        assert any(a.rule_id == "BR2" for a in audit)

    def test_br2_keeps_exactly_one_percent(self, small_registry):
        rows = [base_row(avg_fuel_consumption=10.0, y_diff=0.1, feature_value=9.0)]
        kept, _ = apply_business_rules(rows, self.policy(small_registry))
        assert len(kept) == 1

    def test_br3_requires_above_median_day(self, small_registry):
        # inlier fuel medians: 8.0, 8.1, 8.2 -> median 8.1
        low_day = base_row(avg_fuel_consumption=7.9, y_diff=0.5, feature_value=9.0)
        kept, audit = apply_business_rules([low_day], self.policy(small_registry))
        assert kept == []
        assert any(a.rule_id == "BR3" for a in audit)

    def test_br4_positive_needs_value_above_median(self, small_registry):
        # rpm_high inlier median is 3.0; a value below it fails the direction check
        row = base_row(feature_value=1.0, y_diff=0.5)
        kept, audit = apply_business_rules([row], self.policy(small_registry))
        assert kept == []
        assert any(a.rule_id == "BR4" for a in audit)

    def test_br4_negative_needs_value_below_median(self, small_registry):
        # mean_exterior_temp inlier median is 286.0 and the impact type Negative
        ok = base_row(feature="mean_exterior_temp", feature_value=280.0, y_diff=0.5)
        bad = base_row(feature="mean_exterior_temp", feature_value=290.0, y_diff=0.5)
        kept, audit = apply_business_rules([ok, bad], self.policy(small_registry))
        assert [r.feature_value for r in kept] == [280.0]
        assert any(a.rule_id == "BR4" for a in audit)

    def test_br5_drops_whole_day(self, small_registry):
        rows = [
            base_row(feature="rpm_high", feature_value=9.0, y_diff=5.0),
            base_row(feature="mean_speed_hwy", feature_value=99.0, y_diff=4.0),
        ]
        kept, audit = apply_business_rules(rows, self.policy(small_registry), BR_ORDER)
        # total 9.0 on avg 9.96 is above the 80% cap
        assert kept == []
        assert sum(1 for a in audit if a.rule_id == "BR5") == 2

    def test_fuel_new_recomputed_on_survivors(self, small_registry):
        rows = [
            base_row(feature="rpm_high", feature_value=9.0, y_diff=1.0),
            base_row(feature="mean_speed_hwy", feature_value=99.0, y_diff=0.05),
        ]
        kept, _ = apply_business_rules(rows, self.policy(small_registry))
        # the 0.05 row dies under BR2; fuel_new reflects only the surviving 1.0
        assert len(kept) == 1
        assert kept[0].y_fuel_new == pytest.approx(9.96 - 1.0)

    def test_post_filter_invariants(self, small_registry):
        rng = np.random.default_rng(0)
        rows = []
        for i in range(60):
            rows.append(
                base_row(
                    vehicle_id=f"v{i % 7}",
                    date_tx=date(2020, 4, 1 + (i % 25)),
                    feature="rpm_high" if i % 2 else "mean_speed_hwy",
                    feature_value=float(rng.uniform(0, 120)),
                    y_diff=float(rng.uniform(0, 6)),
                    avg_fuel_consumption=float(rng.uniform(8.5, 12.0)),
                )
            )
        policy = self.policy(small_registry)
        kept, _ = apply_business_rules(rows, policy)
        totals = {}
        for row in kept:
            totals.setdefault(row.day_key, []).append(row)
        for day_rows in totals.values():
            total = sum(r.y_diff for r in day_rows)
            avg = day_rows[0].avg_fuel_consumption
            assert total <= 0.8 * avg
            for r in day_rows:
                assert r.y_fuel_new == avg - total
                assert r.y_diff / avg >= 0.01
                spec = small_registry[r.feature]
                median = policy.feature_median(r.vehicle_group, r.route_type, r.feature)
                if spec.impact_type == "Positive":
                    assert r.feature_value > median
                else:
                    assert r.feature_value < median


class TestRecomputeFuelNew:
    def test_id_anchor_arithmetic(self):
        assert recompute_fuel_new(9.96, [0.22, 0.06, 1.18, 0.07, 0.12]) == pytest.approx(8.31)

    def test_empty_is_identity(self):
        assert recompute_fuel_new(7.5, []) == 7.5


class TestCsvRoundTrip:
    def test_round_trip(self, small_registry, tmp_path):
        model, inliers, target, limits, policy = explanation_setup(small_registry)
        rows = generate_daily_explanations(model, [target], policy, limits)
        path = tmp_path / "expl.csv"
        write_explanations_csv(rows, path)
        loaded = read_explanations_csv(path)
        assert loaded == rows

    def test_medians_export(self, small_registry, tmp_path):
        _, inliers, target, _, policy = explanation_setup(small_registry)
        path = tmp_path / "medians.csv"
        write_inlier_medians_csv(policy, inliers + [target], path)
        text = path.read_text()
        assert "avg_fuel_consumption" in text
        assert "mean_speed_hwy" in text
