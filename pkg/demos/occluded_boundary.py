"""A parked car hides the middle of a road boundary.

The mask splits the boundary label into two fragments. A prediction that
runs through the hidden part is matched one-to-many to both fragments;
the cheapest one-to-one alternative pairs each fragment with a different
prediction and costs far more.
"""

import numpy as np

from pseudomap import SceneParams, gen_scene, solve_global, split_by_mask
from pseudomap.assign import CostParams, split_element
from pseudomap.geometry import MapClass
from pseudomap.synth import disk_mask

scene = gen_scene(SceneParams(seed=0, n_lanes=2, n_crossings=0))
boundary = scene.of_class(MapClass.BOUNDARY)[0]
car = disk_mask(scene.bev_range, boundary.points[len(boundary.points) // 2], 2.0)

labels = split_element(boundary, car)
print(f"observed fragments of the boundary: {len(labels)}")

pred = boundary.with_confidence(0.9)
shifted = pred.with_points(pred.points + np.array([0.4, 0.0])).with_confidence(0.5)
print(f"unmasked subsegments of the prediction: {len(split_by_mask(pred, car))}")

params = CostParams(gate=None)
hybrid = solve_global([pred, shifted], labels, car, params)
for i, o in enumerate(hybrid.outcomes):
    what = "unassigned" if o.kind is None else f"{o.kind} -> labels {list(o.labels)}"
    print(f"prediction {i}: {what}")
print(f"hybrid objective: {hybrid.total_cost:.4f}")

# forbid one-to-many: every prediction covers at most one label
o2o = solve_global([pred, shifted], labels, car, params, max_card=1)
print(f"one-to-one only:  {o2o.total_cost:.4f}")
