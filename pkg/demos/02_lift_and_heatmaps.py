"""Train the spatially grounded agent on the lift toy task, then look inside it.

Training stops once greedy evaluation reaches 90% success. Afterwards the
critic map of the first evaluation state is exported as one CSV and one PPM
image per primitive; the greedy choice is marked in white.
"""

import sys
from pathlib import Path

from groundprim.harness import RunConfig, evaluate, export_heatmap, make_env, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "lift"
config = RunConfig(method="ours", seed=1, task="lift", objects="simple", n_object_points=32,
                   n_background_points=32, total_steps=20_000, warmup_steps=200,
                   eval_interval=100, eval_episodes=10, target_success=0.9, batch_size=32,
                   feature_dim=16, head_width=16, local_widths=(16, 32), decode_widths=(32,))
trainer = train(config, out)
for row in trainer.rows:
    print(f"step {row['step']:>5}: greedy success {row['success_rate']:.2f}")

for length in (10, 20, 30):
    rep = evaluate(trainer.agent, config, length, n_episodes=20)
    print(f"episode length {length}: {rep.success_rate:.2f}")

obs = make_env(config).reset([config.eval_seed, 0])[2]
res = export_heatmap(trainer.agent, obs, out / "heatmaps", tag="start")
i, k = res["selected"]
print(f"greedy action: primitive {k} at point {i}; images in {out / 'heatmaps'}")
