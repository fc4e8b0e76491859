"""A walk through one DoubleBin episode driven by random grounded primitives.

Shows what the observation holds (points, goal flow, segmentation), which
primitives are admissible before and after a grasp, and how the reward moves.
"""

import numpy as np

from groundprim.agent import random_action, valid_mask
from groundprim.env import DoubleBinEnv, EnvConfig
from groundprim.objects import simple_objects

env = DoubleBinEnv(simple_objects(), EnvConfig(task="doublebin", n_object_points=64,
                                               n_background_points=256))
state, goal, obs = env.reset(seed=0)
feats = obs.features()
print(f"object {state.obj.shape.name}: {int(feats[:, 6].sum())} object points, "
      f"{len(feats) - int(feats[:, 6].sum())} background points")
print(f"mean goal flow on the object: {feats[feats[:, 6] > 0, 3:6].mean(axis=0).round(3)}")

rng = np.random.default_rng(0)
for t in range(env.config.max_steps):
    mask = valid_mask(obs.features(), obs.grasped)
    usable = [p for p in range(mask.shape[1]) if mask[:, p].any()]
    action = random_action(obs, rng)
    obs, reward, done, info = env.step(action)
    print(f"t={t + 1:>2} admissible={usable} chose {action.primitive.name:<12} "
          f"reward {reward:+.3f} grasped={info['grasped']}")
    if done:
        print("success" if info["success"] else "time limit")
        break
