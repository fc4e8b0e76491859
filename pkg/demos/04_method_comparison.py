"""Same observations, same primitives, four ways to choose among them.

Each method trains for a short, fixed budget on the lift task with identical
seeds and evaluation episodes. On this easy task every method should get
somewhere; the gap between them grows on the harder DoubleBin tasks.
"""

import sys
from pathlib import Path

from groundprim.harness import RunConfig, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "compare"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 2_000
shared = dict(task="lift", objects="simple", n_object_points=32, n_background_points=32,
              total_steps=steps, warmup_steps=200, eval_interval=max(steps // 4, 1),
              eval_episodes=10, batch_size=32, feature_dim=16, head_width=16,
              local_widths=(16, 32), decode_widths=(32,))
for method in ("ours", "pdqn", "raps", "hacman_logit"):
    tr = train(RunConfig(method=method, seed=0, **shared), out / method)
    curve = " ".join(f"{r['success_rate']:.2f}" for r in tr.rows)
    print(f"{method:<13} success over training: {curve}")
