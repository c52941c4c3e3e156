"""
Lane candidates for a vehicle approaching a fork
================================================

Generate one synthetic three-way fork, move it into the target's frame,
collect the candidate lanes and see which one the future trajectory follows.
"""

import numpy as np

from hlsf import geom
from hlsf.plot import scene_svg
from hlsf.scenes import DatasetSpec, generate_scene

# one scene from the fork template; the seed fixes map, traffic and noise
scene = generate_scene(DatasetSpec(templates=["fork3"], seed=3), 0)
print(scene.scene_id, "branch taken:", scene.gt_lane_hint["target"])

# local frame: target at the origin, heading along +x
view = geom.to_target_frame(scene, "target")
future = view.positions["target"][scene.H + 1:]

# M = 10 slots, real lanes first, the rest padded with fake lanes
cands = geom.build_lane_candidates(view, (0.0, 0.0, 0.0), M=10,
                                   rng=np.random.default_rng(0), future=future)
for i, lane in enumerate(cands.lanes):
    if lane.is_fake:
        continue
    d = geom.polyline_distance(future, lane.points).mean()
    mark = "<- ground truth" if i == cands.gt_index else ""
    print(f"lane {i}: segments {lane.segment_ids}, mean distance {d:5.2f} m {mark}")

# kinematic rows of the history: x, y, speed, heading
hist = geom.derive_kinematics(view.positions["target"][: scene.H + 1], scene.psi)
print(np.round(hist.rows, 2))

# a picture of the candidates with the true future
lanes = [None if l.is_fake else view.frame.to_world(l.points) for l in cands.lanes]
svg = scene_svg(scene.scene_id, lanes, scene.history("target"), scene.future("target"),
                np.empty((0, scene.T, 2)), [], "", cands.gt_index)
with open("lane_candidates.svg", "w") as fh:
    fh.write(svg)
print("wrote lane_candidates.svg")
