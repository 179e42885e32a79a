"""Coverage of single trips vs the union of several trips over one area."""

import numpy as np

from pseudomap import coverage_curve, coverage_ratio, multi_trip_union
from pseudomap.geometry import BevSpec
from pseudomap.synth import gen_trips

spec = BevSpec(-15, 15, -30, 30, 5)
singles, unions = [], []
for seed in range(40):
    trips = gen_trips(seed, 4, spec)
    singles.append(trips[0])
    unions.append(multi_trip_union(trips))

print(f"mean coverage, one trip:   {np.mean([coverage_ratio(m) for m in singles]):.3f}")
print(f"mean coverage, four trips: {np.mean([coverage_ratio(m) for m in unions]):.3f}")
taus = np.linspace(0, 0.9, 10)
print("tau    single  union")
for t, a, b in zip(taus, coverage_curve(singles, taus), coverage_curve(unions, taus)):
    print(f"{t:.1f}   {a:6.2f}  {b:6.2f}")
