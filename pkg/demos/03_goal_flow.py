"""Estimating goal flow when correspondences are unknown.

The simulator knows the true goal pose; a real system only sees two point
clouds. Here both are sampled independently from the same object, the goal
copy is rotated and shifted, and registration recovers the flow.

The second object is a regular hexagonal can. Its six-fold symmetry means
several poses fit the goal cloud equally well, so the recovered rotation can
be off by a multiple of 60 degrees while every flow vector still lands on the
goal surface.
"""

import numpy as np
from scipy.spatial import cKDTree

from groundprim.geometry import PointCloud, RigidTransform, rot_z
from groundprim.objects import ObjectInstance, random_shape, simple_objects
from groundprim.registration import estimate_goal_flow, sample_surface, transform_errors

rng = np.random.default_rng(5)
truth = RigidTransform(rot_z(np.radians(120)), [0.25, -0.05, 0.0])
for shape in (random_shape("prism", rng, "irregular"), simple_objects()[1]):
    obj = ObjectInstance(shape)
    current = sample_surface(obj, 500, rng)
    goal = truth.apply(sample_surface(obj, 500, rng)) + rng.normal(0, 0.002, (500, 3))
    est = estimate_goal_flow(PointCloud(current), PointCloud(goal))
    rot, trans = transform_errors(est.result.transform, truth)
    err = np.linalg.norm(est.flow - (truth.apply(current) - current), axis=1)
    surface = cKDTree(goal).query(current + est.flow)[0]
    print(f"{shape.name}: rotation error {rot:.1f} deg, translation error {trans * 1000:.1f} mm")
    print(f"    flow error vs. true correspondences: mean {err.mean() * 1000:.1f} mm")
    print(f"    distance of flowed points to the goal cloud: mean {surface.mean() * 1000:.1f} mm")
