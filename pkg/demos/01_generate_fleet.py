"""Generate a synthetic fleet and look at what comes out.

The generator plants a known additive ground truth: every vehicle-day's
fuel is a group base plus step-function contributions from twelve
telemetry features, plus optional noise and cause-driven outlier days.
Everything downstream (training, explanations, evaluations) can be
checked against these planted values.

Run:  python demos/01_generate_fleet.py
"""

from pathlib import Path

from fleetfuel.synthgen import default_spec, generate

out = Path("demo_out/fleet")
spec = default_spec(seed=42, n_vehicles=60, n_days=15, outlier_rate=0.04)
print(f"groups: {[(g.make, g.model, g.base_fuel) for g in spec.groups]}")
print(f"features: {[f.name for f in spec.features]}")

fleet = generate(spec, out)
print(f"\nwrote {fleet.feed_path} plus VIN map, catalog and truth tables")

# The feed is plain CSV telemetry: one timestamped sample per row.
with open(fleet.feed_path) as fh:
    for _ in range(6):
        print("  ", fh.readline().rstrip())

# The truth table knows exactly why each day burned what it burned.
day = next(d for d in fleet.days if d.planted_outlier)
print(f"\na planted outlier day: {day.vehicle_id} on {day.date}")
print(f"  base fuel     {day.base_fuel:6.2f} L/100km")
for name, contrib in sorted(day.contributions.items(), key=lambda kv: -kv[1])[:5]:
    print(f"  {name:22s} +{contrib:.2f}")
print(f"  noise residual {day.noise_residual:+.4f}")
print(f"  total          {day.fuel_l100:6.2f} (clean would have been {day.clean_fuel_l100:.2f})")

n_outliers = sum(1 for d in fleet.days if d.planted_outlier)
print(f"\n{len(fleet.days)} vehicle-days, {n_outliers} planted outliers")
