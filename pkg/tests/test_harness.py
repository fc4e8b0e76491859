import csv
import json

import numpy as np
import pytest

from groundprim import harness
from groundprim.agent import select_eval
from groundprim.cli import main
from groundprim.harness import (INVALID_COLOR, RunConfig, Trainer, evaluate, export_heatmap,
                                heat_color, load_agent, load_config_file, normalized_q,
                                read_ppm, record_episode, replay_trace, train,
                                write_config_file)
from groundprim.nn import CheckpointError

TINY = dict(task="translation", objects="simple", upright_only=True, n_object_points=24,
            n_background_points=24, total_steps=40, warmup_steps=16, eval_interval=20,
            eval_episodes=2, batch_size=8, feature_dim=8, head_width=8, local_widths=(8, 16),
            decode_widths=(16,), buffer_capacity=1000)


def tiny(**kw):
    return RunConfig(**{**TINY, **kw})


def read_metrics(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- configuration -----------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError, match="unknown method"):
        RunConfig(method="sac")
    with pytest.raises(ValueError, match="warmup"):
        RunConfig(total_steps=10, warmup_steps=20)
    with pytest.raises(ValueError):
        RunConfig(eval_interval=0)
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"learning_rate": 1})
    assert RunConfig(eval_lengths=[10, 20]).eval_lengths == (10, 20)


def test_agent_overrides_respect_method_defaults():
    assert RunConfig(method="ours").agent_config().actor_interval == 4
    assert RunConfig(method="raps").agent_config().actor_interval == 1
    assert RunConfig(method="raps", lr=3e-4).agent_config().lr == 3e-4


def test_config_file_roundtrip(tmp_path):
    cfg = tiny(seed=5, target_success=0.9)
    write_config_file(tmp_path / "c.txt", cfg)
    assert RunConfig.from_dict(load_config_file(tmp_path / "c.txt")) == cfg
    (tmp_path / "d.txt").write_text("# comment\nseed = 3  # trailing\n\ntask = lift\ntwin = false\n")
    assert load_config_file(tmp_path / "d.txt") == {"seed": 3, "task": "lift", "twin": False}
    (tmp_path / "e.txt").write_text("seed 3\n")
    with pytest.raises(ValueError, match="key = value"):
        load_config_file(tmp_path / "e.txt")
    assert cfg.config_hash() == tiny(seed=5, target_success=0.9).config_hash()
    assert cfg.config_hash() != tiny(seed=6).config_hash()


# -- training loop -----------------------------------------------------------

def test_warmup_only_run_makes_no_updates(tmp_path):
    tr = Trainer(tiny(total_steps=20, warmup_steps=20), tmp_path)
    tr.run()
    assert tr.agent.updates == 0 and len(tr.buffer) == 20


def test_update_ratio(tmp_path):
    tr = Trainer(tiny(total_steps=36, update_ratio=0.5), tmp_path)
    tr.run()
    assert tr.agent.updates == 10  # (36 - 16) * 0.5


def test_metrics_rows_at_eval_interval(tmp_path):
    tr = train(tiny(), tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [int(r["step"]) for r in rows] == [20, 40]
    assert list(rows[0]) == harness.METRICS_FIELDS
    assert rows[0]["config_hash"] == tiny().config_hash()
    assert int(rows[-1]["updates"]) == 24 and int(rows[-1]["buffer_size"]) == 40
    assert (tmp_path / "timing.csv").exists() and (tmp_path / "config.txt").exists()
    assert (tmp_path / "checkpoints" / "latest").read_text() == "step_00000040"
    assert tr.rows[-1]["actor_loss"] is not None


@pytest.mark.parametrize("method", ["ours", "pdqn", "raps", "hacman_logit"])
def test_training_is_deterministic(method, tmp_path):
    train(tiny(method=method), tmp_path / "a")
    train(tiny(method=method), tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()


@pytest.mark.parametrize("method", ["ours", "hacman_logit"])
def test_resume_equals_uninterrupted(method, tmp_path):
    cfg = tiny(method=method, total_steps=60)
    train(cfg, tmp_path / "full")
    train(cfg, tmp_path / "part", until=20)
    train(cfg, tmp_path / "part", resume=tmp_path / "part" / "checkpoints" / "step_00000020")
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == \
        (tmp_path / "part" / "metrics.csv").read_bytes()


def test_target_success_stops_early(tmp_path, monkeypatch):
    monkeypatch.setattr(harness, "evaluate", lambda agent, c: harness.EvalReport(10, 2, 1.0, 0.0, 0.0))
    tr = train(tiny(total_steps=200, target_success=0.9), tmp_path)
    assert tr.step == 20 and len(tr.rows) == 1


def test_nan_loss_is_dumped(tmp_path, monkeypatch):
    tr = Trainer(tiny(), tmp_path)
    tr.run(until=17)
    monkeypatch.setattr(tr.agent, "update", lambda b: {"critic_loss": float("nan"),
                                                       "actor_loss": None, "mean_target": 0.0})
    with pytest.raises(FloatingPointError, match="non-finite"):
        tr.learn()
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 17


# -- evaluation --------------------------------------------------------------

def test_evaluate_zero_episodes():
    cfg = tiny()
    rep = evaluate(harness.build_agent(cfg), cfg, n_episodes=0)
    assert np.isnan(rep.success_rate) and rep.n_episodes == 0


def test_longer_episodes_never_lose_successes(tmp_path):
    cfg = tiny(total_steps=60, eval_episodes=6)
    tr = train(cfg, tmp_path)
    reps = [evaluate(tr.agent, cfg, L) for L in (10, 20, 30)]
    assert reps[0].success_rate <= reps[1].success_rate <= reps[2].success_rate
    for short, long in zip(reps, reps[1:]):
        assert all(b or not a for a, b in zip(short.successes, long.successes))


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_double_roundtrip(tmp_path):
    tr = train(tiny(), tmp_path / "run")
    ck = tmp_path / "run" / "checkpoints" / "step_00000040"
    t1 = Trainer.from_checkpoint(ck, tmp_path / "x")
    t1.save_checkpoint(tmp_path / "again" / "ck")
    t2 = Trainer.from_checkpoint(tmp_path / "again" / "ck", tmp_path / "y")
    a, b = t1.agent.state_arrays(), t2.agent.state_arrays()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert t2.step == tr.step and len(t2.buffer) == len(tr.buffer)
    assert t2.agent.rng.bit_generator.state == tr.agent.rng.bit_generator.state


def test_corrupt_checkpoint_is_rejected(tmp_path):
    train(tiny(total_steps=20), tmp_path)
    ck = tmp_path / "checkpoints" / "step_00000020"
    m = json.loads((ck / "manifest.json").read_text())
    m["meta"]["config"]["method"] = "nope"
    (ck / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError):
        Trainer.from_checkpoint(ck)
    with pytest.raises(CheckpointError, match="no checkpoint"):
        harness.resolve_checkpoint(tmp_path / "missing")


# -- heatmaps ----------------------------------------------------------------

def test_normalization_and_colors():
    q = np.array([1.0, 3.0, 2.0, 9.0])
    valid = np.array([True, True, True, False])
    v = normalized_q(q, valid)
    assert np.allclose(v[:3], [0, 1, 0.5]) and np.isnan(v[3])
    assert np.allclose(normalized_q(np.full(3, 2.0), np.ones(3, bool)), 0.5)
    assert heat_color(0) == (0, 0, 255) and heat_color(1) == (255, 0, 0)
    assert heat_color(0.5) == (128, 255, 128)


@pytest.fixture(scope="module")
def agent_and_obs():
    cfg = tiny()
    agent = harness.build_agent(cfg)
    obs = harness.make_env(cfg).reset(0)[2]
    return agent, obs


def test_heatmap_marks_greedy_choice(agent_and_obs, tmp_path):
    agent, obs = agent_and_obs
    res = export_heatmap(agent, obs, tmp_path, tag="t", size=64)
    _, qs, mask = agent.build_maps(obs.features(), obs.grasped)
    assert res["selected"] == tuple(int(v) for v in select_eval(qs[0], mask))
    i, k = res["selected"]
    for name, (csv_path, ppm_path) in res["files"].items():
        rows = list(csv.DictReader(open(csv_path)))
        assert len(rows) == len(obs.cloud.points)
        chosen = [j for j, r in enumerate(rows) if r["selected"] == "1"]
        assert chosen == ([i] if name == list(res["files"])[k] else [])
        kk = list(res["files"]).index(name)
        assert [r["valid"] == "1" for r in rows] == mask[:, kk].tolist()
        assert all(r["q_normalized"] == "" for r in rows if r["valid"] == "0")
        assert read_ppm(ppm_path).shape == (64, 64, 3)


def test_constant_critic_renders_uniform_color(agent_and_obs, tmp_path):
    agent, obs = agent_and_obs
    agent = harness.build_agent(tiny())
    for c in agent.critics:
        for h in c.heads:
            h.layers[-1].weight.data[:] = 0.0
            h.layers[-1].bias.data[:] = 0.0
    res = export_heatmap(agent, obs, tmp_path, size=64)
    img = read_ppm(res["files"]["POKE"][1])
    colors = {tuple(c) for c in img.reshape(-1, 3)} - {(0, 0, 0), (255, 255, 255)}
    assert colors <= {heat_color(0.5), INVALID_COLOR}
    assert heat_color(0.5) in colors


def test_heatmap_rejects_baselines(agent_and_obs, tmp_path):
    _, obs = agent_and_obs
    with pytest.raises(ValueError):
        export_heatmap(harness.build_agent(tiny(method="raps")), obs, tmp_path)


# -- traces and CLI ----------------------------------------------------------

def test_trace_replays_exactly(agent_and_obs, tmp_path):
    agent, _ = agent_and_obs
    info = record_episode(agent, tiny(), [7, 0], tmp_path / "t.jsonl")
    res = replay_trace(tmp_path / "t.jsonl")
    assert res["steps"] == info["steps"] and not res["mismatches"]
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    rec = json.loads(lines[1])
    rec["reward"] += 1.0
    lines[1] = json.dumps(rec)
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    assert len(replay_trace(tmp_path / "bad.jsonl")["mismatches"]) == 1


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "run.txt"
    write_config_file(cfg, tiny())
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--seed", "2", "--out", str(run)]) == 0
    assert load_config_file(run / "config.txt")["seed"] == 2
    assert main(["eval", str(run), "--lengths", "10", "20", "--episodes", "2",
                 "--json", str(tmp_path / "e.json"), "--trace", str(tmp_path / "t.jsonl")]) == 0
    reports = json.loads((tmp_path / "e.json").read_text())
    assert [r["episode_length"] for r in reports] == [10, 20]
    assert main(["replay", str(tmp_path / "t.jsonl")]) == 0
    assert main(["heatmap", str(run), "--steps", "2", "--out", str(tmp_path / "hm")]) == 0
    assert len(list((tmp_path / "hm").glob("*.ppm"))) >= 5
    assert main(["register-bench", "--trials", "2", "--points", "200",
                 "--out", str(tmp_path / "reg.csv")]) == 0
    out = capsys.readouterr().out
    assert "replay matches trace" in out and "trials within 3 deg" in out


def test_cli_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ENV_VAR, str(tmp_path))
    assert main(["train", "--task", "translation", "--objects", "simple",
                 "--n-object-points", "16", "--n-background-points", "16",
                 "--total-steps", "10", "--warmup-steps", "10", "--eval-interval", "10",
                 "--eval-episodes", "1"]) == 0
    assert (tmp_path / "ours_s0" / "metrics.csv").exists()
    agent, cfg = load_agent(tmp_path / "ours_s0")
    assert cfg.total_steps == 10
