"""Command line: ``train``, ``eval``, ``heatmap``, ``register-bench``, ``replay``.

Run configuration comes from an optional ``key = value`` file, overridden by
``--field value`` flags named after :class:`~groundprim.harness.RunConfig`
fields (underscores or dashes). Outputs default to ``$GROUNDPRIM_OUT``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .harness import RunConfig


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    for f in dataclasses.fields(RunConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE",
                       help=f"default: {f.default!r}")


def config_from_args(args) -> RunConfig:
    values = harness.load_config_file(args.config) if args.config else {}
    for f in dataclasses.fields(RunConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            values[f.name] = raw if f.type == "str" else harness.parse_value(raw)
    return RunConfig.from_dict(values)


def cmd_train(args):
    config = config_from_args(args)
    tr = harness.train(config, args.out, resume=args.resume)
    for row in tr.rows:
        print(f"step {row['step']:>8}  success {row['success_rate']:.3f}  "
              f"critic {row['critic_loss']}  actor {row['actor_loss']}")
    print(f"metrics: {tr.out / 'metrics.csv'}")


def cmd_eval(args):
    agent, config = harness.load_agent(args.checkpoint)
    reports = []
    for length in args.lengths or config.eval_lengths:
        rep = harness.evaluate(agent, config, length, args.episodes, args.split)
        reports.append(rep.to_dict())
        print(f"length {length:>3}: success {rep.success_rate:.3f} ± {rep.stderr:.3f} "
              f"({rep.n_episodes} episodes)")
        for name, (s, n) in sorted(rep.per_object.items()):
            print(f"    {name:<24} {s}/{n}")
    if args.json:
        Path(args.json).write_text(json.dumps(reports, indent=1))
    if args.trace:
        info = harness.record_episode(agent, config, [config.eval_seed, 0], args.trace)
        print(f"trace: {args.trace} ({info['steps']} steps, success={info['success']})")


def cmd_heatmap(args):
    agent, config = harness.load_agent(args.checkpoint)
    env = harness.make_env(config)
    _, _, obs = env.reset(args.seed)
    out = Path(args.out) if args.out else harness.output_root() / "heatmaps"
    for t in range(args.steps):
        res = harness.export_heatmap(agent, obs, out, tag=f"step{t:03d}")
        i, k = res["selected"]
        print(f"step {t}: selected point {i}, primitive {k}")
        action, _ = agent.act(obs, explore=False)
        obs, _, done, _ = env.step(action)
        if done:
            break
    print(f"heatmaps: {out}")


def cmd_register_bench(args):
    from .registration import registration_study, write_benchmark_csv

    rows = registration_study(args.trials, args.points, args.noise, args.seed)
    out = Path(args.out) if args.out else harness.output_root() / "registration.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_benchmark_csv(out, rows)
    ok = sum(r["rot_err_deg"] < 3.0 and r["trans_err_m"] < 0.005 for r in rows)
    print(f"{ok}/{len(rows)} trials within 3 deg / 5 mm; csv: {out}")


def cmd_replay(args):
    res = harness.replay_trace(args.trace)
    for t, r in enumerate(res["rewards"], 1):
        print(f"t={t:>2} reward {r:+.6f}")
    if res["mismatches"]:
        print(f"{len(res['mismatches'])} mismatching steps")
        return 1
    print("replay matches trace")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groundprim")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy")
    _add_config_flags(t)
    t.add_argument("--out", help="run directory")
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--lengths", type=int, nargs="+")
    e.add_argument("--episodes", type=int)
    e.add_argument("--split", choices=["train", "unseen_instance", "unseen_category"])
    e.add_argument("--json", help="write reports as JSON")
    e.add_argument("--trace", help="also record one episode trace (JSONL)")
    e.set_defaults(fn=cmd_eval)

    h = sub.add_parser("heatmap", help="export critic heatmaps along a greedy rollout")
    h.add_argument("checkpoint")
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--steps", type=int, default=1)
    h.add_argument("--out")
    h.set_defaults(fn=cmd_heatmap)

    r = sub.add_parser("register-bench", help="synthetic registration benchmark")
    r.add_argument("--trials", type=int, default=100)
    r.add_argument("--points", type=int, default=500)
    r.add_argument("--noise", type=float, default=0.002)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_register_bench)

    rp = sub.add_parser("replay", help="re-execute an episode trace and compare rewards")
    rp.add_argument("trace")
    rp.set_defaults(fn=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.fn(args) or 0


if __name__ == "__main__":
    sys.exit(main())
